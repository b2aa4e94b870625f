import json

import pytest

from slrprecond.cli import UsageError, main, parse_spec_file
from slrprecond.harness import CSV_COLUMNS, read_csv


def _spec(tmp_path, body):
    p = tmp_path / "spec.ini"
    p.write_text(body)
    return str(p)


BLOCK = """[instance]
family = block
d = 32
n = 128
k = 2
n_blocks = 4
epsilon = 1e-4

[noise]
kind = gaussian
sigma = 0.0
"""


def test_parse_spec_defaults(tmp_path):
    spec = parse_spec_file(_spec(tmp_path, "[instance]\nfamily = identity\nd = 4\nn = 8\nk = 1\n"))
    assert spec["instance"]["mode"] == "fixed"
    assert spec["noise"] == {"kind": "gaussian", "sigma": 0.0}


@pytest.mark.parametrize("body", [
    "[instance]\nfamily = block\nd = 4\nn = 8\nk = 1\ncolour = red\n",
    "[extra]\nx = 1\n",
    "[instance]\nfamily = block\nd = four\nn = 8\nk = 1\n",
    "[instance]\nfamily = block\nn = 8\nk = 1\n",
])
def test_bad_specs_rejected(tmp_path, body):
    with pytest.raises(UsageError):
        parse_spec_file(_spec(tmp_path, body))


def test_gen_solve_roundtrip(tmp_path, capsys):
    inst = tmp_path / "inst"
    assert main(["gen", "--spec", _spec(tmp_path, BLOCK), "--out", str(inst), "--seed", "3"]) == 0
    capsys.readouterr()
    out = tmp_path / "report.json"
    assert main(["solve", "--instance", str(inst), "--mode", "fixed", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report) == {"config_echo", "instance_summary", "precond_stats", "errors", "success_flags", "seeds"}
    if report["success_flags"]["support_event"]:
        assert report["errors"]["pipeline"] <= 1e-6


def test_precondition_and_verify(tmp_path, capsys):
    inst = tmp_path / "inst"
    main(["gen", "--spec", _spec(tmp_path, BLOCK), "--out", str(inst), "--seed", "1"])
    pre = tmp_path / "pre"
    assert main(["precondition", "--instance", str(inst), "--k", "2", "--delta", "0.2",
                 "--kappa-bound", "200", "--out", str(pre), "--seed", "0"]) == 0
    assert (pre / "basis.slrm").exists() and (pre / "rounds.jsonl").exists()
    capsys.readouterr()
    assert main(["verify", "--instance", str(inst), "--precond", str(pre), "--samples", "200", "--seed", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["passed"]

    ident = tmp_path / "ident"
    main(["precondition", "--instance", str(inst), "--k", "2", "--delta", "0.05", "--kappa-bound", "200",
          "--out", str(ident), "--identity", "--kappa-claim", "10"])
    # 4 blocks of 8: about 23% of pairs collide, far above 0.05 + 0.068
    assert main(["verify", "--instance", str(inst), "--precond", str(ident), "--samples", "400"]) == 4


def test_usage_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["precondition", "--instance", "x"]) == 2
    assert main(["gen", "--spec", _spec(tmp_path, "[bogus]\n"), "--out", str(tmp_path / "o")]) == 2
    assert main(["verify", "--instance", str(tmp_path / "missing"), "--precond", "p", "--samples", "5"]) == 2
    assert main(["precondition", "--instance", "x", "--k", "2", "--delta", "1.5",
                 "--kappa-bound", "3", "--out", "o"]) == 2


def test_corrupt_matrix_is_usage_error(tmp_path):
    inst = tmp_path / "inst"
    main(["gen", "--spec", _spec(tmp_path, BLOCK), "--out", str(inst)])
    (inst / "design.slrm").write_bytes(b"JUNK")
    assert main(["solve", "--instance", str(inst), "--mode", "fixed"]) == 2


def test_mode_mismatch(tmp_path):
    inst = tmp_path / "inst"
    main(["gen", "--spec", _spec(tmp_path, BLOCK), "--out", str(inst)])
    assert main(["solve", "--instance", str(inst), "--mode", "gaussian"]) == 2


def test_gaussian_mode_bundle(tmp_path, capsys):
    body = BLOCK.replace("family = block", "family = block\nmode = gaussian").replace("n = 128", "n = 1024")
    inst = tmp_path / "g"
    assert main(["gen", "--spec", _spec(tmp_path, body), "--out", str(inst), "--seed", "2"]) == 0
    assert main(["solve", "--instance", str(inst), "--mode", "gaussian", "--n-phase1", "800"]) == 0
    report = json.loads(capsys.readouterr().out.split("\n", 1)[1])
    assert report["errors"]["population"] >= 0.0


def test_bench_csv_schema_and_reproducibility(tmp_path, monkeypatch):
    monkeypatch.setenv("SLR_SEED", "5")
    args = ["bench", "--family", "block", "--d", "16", "--k", "2", "--n-grid", "32,64", "--seeds", "2",
            "--n-blocks", "4", "--epsilon", "1e-3", "--methods", "pipeline,ols"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a), "--gnuplot", str(tmp_path / "plot.gp")]) == 0
    assert main(args + ["--out", str(b)]) == 0
    rows_a, rows_b = read_csv(a), read_csv(b)
    assert list(rows_a[0].keys()) == list(CSV_COLUMNS)
    assert len(rows_a) == 2 * 2 * 2
    for ra, rb in zip(rows_a, rows_b):
        assert {k: v for k, v in ra.items() if k != "wall_ms"} == {k: v for k, v in rb.items() if k != "wall_ms"}
    assert [int(r["N"]) for r in rows_a] == sorted(int(r["N"]) for r in rows_a)
    assert "plot" in (tmp_path / "plot.gp").read_text()


def test_bench_rejects_unknown_method(tmp_path):
    assert main(["bench", "--methods", "magic", "--out", str(tmp_path / "x.csv")]) == 2


def test_bad_seed_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SLR_SEED", "abc")
    assert main(["gen", "--spec", _spec(tmp_path, BLOCK), "--out", str(tmp_path / "o")]) == 2
