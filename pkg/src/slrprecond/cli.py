"""``slr`` command line: gen, precondition, verify, solve, bench.

Exit codes: 0 ok, 2 bad arguments or inputs, 3 numerical failure,
4 verification failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from pathlib import Path

from .core import InvariantViolation, NoiseModel, NumericalFailure, Preconditioner
from .harness import (
    bench,
    gnuplot_script,
    make_gaussian_problem,
    run_fixed,
    run_gaussian,
    worker_count,
    write_csv,
)
from .instances import load_instance, make_fixed_instance, save_instance
from .io import MatrixFormatError, read_json, write_json
from .preconditioner import find_preconditioner, load_preconditioner, save_preconditioner, verify_preconditioner

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

INSTANCE_KEYS = {
    "family": str, "mode": str, "d": int, "n": int, "k": int, "n_blocks": int,
    "epsilon": float, "n_pairs": int, "perturbation": float,
}
NOISE_KEYS = {"kind": str, "sigma": float}
SECTIONS = {"instance": INSTANCE_KEYS, "noise": NOISE_KEYS}


class UsageError(ValueError):
    pass


def parse_spec_file(path) -> dict:
    """Read a flat ``key = value`` spec file; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read spec file: {exc}") from exc
    out: dict = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise UsageError(f"unknown section [{section}]")
        keys = SECTIONS[section]
        vals = {}
        for key, raw in cp.items(section):
            if key not in keys:
                raise UsageError(f"unknown key {key!r} in [{section}]")
            try:
                vals[key] = keys[key](raw.strip())
            except ValueError as exc:
                raise UsageError(f"bad value for {section}.{key}: {raw!r}") from exc
        out[section] = vals
    inst = out.get("instance", {})
    for req in ("family", "d", "n", "k"):
        if req not in inst:
            raise UsageError(f"missing required key instance.{req}")
    inst.setdefault("mode", "fixed")
    if inst["mode"] not in ("fixed", "gaussian"):
        raise UsageError(f"mode must be fixed or gaussian, got {inst['mode']!r}")
    out.setdefault("noise", {})
    out["noise"].setdefault("kind", "gaussian")
    out["noise"].setdefault("sigma", 0.0)
    return out


def _master_seed(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("SLR_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"SLR_SEED must be an integer, got {env!r}") from exc


def _u64(text: str) -> int:
    val = int(text)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def _fraction(text: str) -> float:
    val = float(text)
    if not 0 < val < 1:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return val


def _positive_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return val


def cmd_gen(args) -> int:
    spec = parse_spec_file(args.spec)
    inst, noise = spec["instance"], spec["noise"]
    seed = _master_seed(args.seed)
    out = Path(args.out)
    noise_model = NoiseModel(noise["kind"], noise["sigma"])
    extra = {key: inst[key] for key in ("n_blocks", "epsilon", "n_pairs", "perturbation") if key in inst}
    if inst["mode"] == "fixed":
        generated = make_fixed_instance(inst["family"], inst["d"], inst["n"], inst["k"], noise_model, seed, **extra)
        save_instance(generated, out)
        meta = read_json(out / "meta.json")
        meta["mode"] = "fixed"
        write_json(out / "meta.json", meta)
    else:
        cov, support, w_star, _ = make_gaussian_problem(
            inst["family"], inst["d"], inst["k"], noise["sigma"], seed,
            extra.get("n_blocks", 1), extra.get("epsilon", 1.0), noise["kind"])
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "meta.json", {
            "mode": "gaussian", "family": inst["family"], "n_cols": inst["d"], "n_rows": inst["n"],
            "k": inst["k"], "support": list(support.indices), "w_star": [float(v) for v in w_star],
            "noise": {"kind": noise_model.kind.value, "sigma": noise_model.sigma},
            "params": {"n_blocks": cov.n_blocks, "epsilon": cov.epsilon}, "seeds": {"master": seed},
        })
    print(json.dumps({"instance": str(out), "mode": inst["mode"], "seed": seed}))
    return EXIT_OK


def cmd_precondition(args) -> int:
    inst = load_instance(args.instance)
    seed = _master_seed(args.seed)
    if args.identity:
        claim = args.kappa_claim if args.kappa_claim is not None else args.kappa_bound
        precond = Preconditioner.identity(inst.design.n_cols, k=args.k, kappa=claim, delta=args.delta)
        precond.metadata["seed"] = seed
    else:
        precond = find_preconditioner(inst.design, args.k, args.delta, args.kappa_bound, seed)
    save_preconditioner(precond, args.out)
    print(json.dumps({"ell": precond.ell, "kappa_final": precond.kappa_param, "out": str(args.out)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    inst = load_instance(args.instance)
    precond = load_preconditioner(args.precond)
    seed = _master_seed(args.seed)
    rep = verify_preconditioner(inst.design, precond, precond.sparsity_k, args.samples, seed,
                                kappa=args.kappa, delta=args.delta)
    print(json.dumps(rep.to_dict(), sort_keys=True))
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_solve(args) -> int:
    meta = read_json(Path(args.instance) / "meta.json")
    mode = args.mode
    if meta.get("mode", "fixed") != mode:
        raise UsageError(f"instance was generated for mode {meta.get('mode', 'fixed')!r}, not {mode!r}")
    if mode == "fixed":
        inst = load_instance(args.instance)
        k = args.k or inst.support.k
        report = run_fixed(inst, k, args.delta, args.kappa_bound, args.seed)
    else:
        params = meta.get("params", {})
        k = args.k or meta["k"]
        seed = meta["seeds"]["master"] if args.seed is None else args.seed
        report = run_gaussian(meta["family"], meta["n_cols"], k, meta["noise"]["sigma"], meta["n_rows"],
                              seed, args.delta, params.get("n_blocks", 1), params.get("epsilon", 1.0),
                              args.n_phase1, noise_kind=meta["noise"]["kind"])
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    seed = _master_seed(args.seed)
    n_grid = [int(v) for v in args.n_grid.split(",") if v.strip()]
    if not n_grid or min(n_grid) < 1:
        raise UsageError("--n-grid needs positive integers")
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    unknown = set(methods) - {"pipeline", "lasso", "ols"}
    if unknown:
        raise UsageError(f"unknown methods {sorted(unknown)}")
    params = {}
    if args.family == "block":
        params = {"n_blocks": args.n_blocks, "epsilon": args.epsilon}
    elif args.family == "duplicates":
        params = {"n_pairs": args.n_pairs, "perturbation": args.perturbation}
    rows = bench(args.family, args.d, args.k, n_grid, args.seeds, seed, sigma=args.sigma,
                 delta=args.delta, methods=methods, workers=worker_count(), **params)
    write_csv(rows, args.out)
    if args.gnuplot:
        Path(args.gnuplot).write_text(gnuplot_script(args.out))
    print(json.dumps({"rows": len(rows), "csv": str(args.out)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slr", description="Preconditioned sparse linear regression toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an instance bundle from a spec file")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=_u64)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("precondition", help="search for a preconditioner")
    c.add_argument("--instance", required=True)
    c.add_argument("--k", type=_positive_int, required=True)
    c.add_argument("--delta", type=_fraction, required=True)
    c.add_argument("--kappa-bound", type=float, required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=_u64)
    c.add_argument("--identity", action="store_true", help="write the identity preconditioner instead")
    c.add_argument("--kappa-claim", type=float, help="kappa recorded with --identity")
    c.set_defaults(func=cmd_precondition)

    v = sub.add_parser("verify", help="Monte Carlo check of a preconditioner")
    v.add_argument("--instance", required=True)
    v.add_argument("--precond", required=True)
    v.add_argument("--samples", type=_positive_int, required=True)
    v.add_argument("--seed", type=_u64)
    v.add_argument("--kappa", type=float, help="override the recorded kappa bound")
    v.add_argument("--delta", type=float, help="override the recorded failure level")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("solve", help="run a full pipeline and print a run report")
    s.add_argument("--instance", required=True)
    s.add_argument("--mode", choices=("fixed", "gaussian"), required=True)
    s.add_argument("--k", type=_positive_int)
    s.add_argument("--delta", type=_fraction, default=0.2)
    s.add_argument("--kappa-bound", type=float)
    s.add_argument("--n-phase1", type=_positive_int)
    s.add_argument("--seed", type=_u64)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="sweep N and seeds, write CSV")
    b.add_argument("--family", choices=("identity", "block", "duplicates"), default="block")
    b.add_argument("--d", type=_positive_int, default=512)
    b.add_argument("--k", type=_positive_int, default=2)
    b.add_argument("--n-grid", default="256,1024,4096")
    b.add_argument("--seeds", type=_positive_int, default=20)
    b.add_argument("--sigma", type=float, default=0.1)
    b.add_argument("--delta", type=_fraction, default=0.2)
    b.add_argument("--n-blocks", type=_positive_int, default=64)
    b.add_argument("--epsilon", type=float, default=1e-6)
    b.add_argument("--n-pairs", type=int, default=0)
    b.add_argument("--perturbation", type=float, default=1.0)
    b.add_argument("--methods", default="pipeline,lasso,ols")
    b.add_argument("--seed", type=_u64)
    b.add_argument("--out", required=True)
    b.add_argument("--gnuplot", help="also write a gnuplot script here")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (NumericalFailure, InvariantViolation, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, MatrixFormatError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
