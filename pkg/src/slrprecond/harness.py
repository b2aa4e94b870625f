"""Experiment runner: run reports, kappa-bound resolution and the N sweep."""
from __future__ import annotations

import csv
import hashlib
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import KAPPA_CAP, DesignMatrix, NoiseModel
from .instances import (
    BlockSigmaSpec,
    GeneratedInstance,
    SlrSampler,
    make_fixed_instance,
    random_support,
    scale_ground_truth,
    stream_rngs,
    stream_seeds,
)
from .preconditioner import support_is_good, verify_preconditioner
from .regression import (
    baseline_lasso_slow_rate,
    baseline_ols_restricted,
    fixed_design_pipeline,
    gaussian_design_pipeline,
    prediction_error,
)
from .subproblems import ENUM_BUDGET, BudgetExceeded, sparse_condition_number

CSV_COLUMNS = ("family", "d", "k", "N", "seed", "method", "error", "ell", "kappa_final", "wall_ms")


def _finite(x, fallback=None):
    if x is None:
        return fallback
    x = float(x)
    return x if math.isfinite(x) else fallback


@dataclass
class RunReport:
    config_echo: dict
    instance_summary: dict
    precond_stats: dict
    errors: dict
    success_flags: dict
    seeds: dict

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_kappa_bound(design: DesignMatrix, k: int, analytic: float | None = None,
                        brute_force: bool = True) -> tuple[float, str]:
    """Upper bound on the sparse condition number and where it came from."""
    if brute_force and math.comb(design.n_cols, k) <= ENUM_BUDGET:
        try:
            val = sparse_condition_number(design, k)
            return (min(val, KAPPA_CAP), "brute_force") if math.isfinite(val) else (KAPPA_CAP, "cap")
        except BudgetExceeded:
            pass
    if analytic is not None and math.isfinite(analytic):
        # sample designs only approximate the analytic value
        return min(2.0 * analytic, KAPPA_CAP), "analytic"
    return KAPPA_CAP, "cap"


def instance_summary(inst: GeneratedInstance, kappa_bound: float, source: str) -> dict:
    return {
        "family": inst.family,
        "n_rows": inst.design.n_rows,
        "n_cols": inst.design.n_cols,
        "k": inst.support.k,
        "kappa_analytic": _finite(inst.kappa),
        "kappa_bound": kappa_bound,
        "kappa_source": source,
        "support_hash": inst.support_hash(),
        "params": inst.params,
    }


def run_fixed(inst: GeneratedInstance, k: int, delta: float, kappa_bound: float | None = None,
              seed: int | None = None, baselines: bool = True, verify_samples: int = 0) -> RunReport:
    """Fixed-design pipeline on a generated instance, plus the two baselines."""
    if kappa_bound is None:
        kappa_bound, source = resolve_kappa_bound(inst.design, k, inst.kappa)
    else:
        source = "caller"
    alg_seed = int(inst.seeds.get("algorithm", 0) if seed is None else seed)
    t0 = time.perf_counter()
    res = fixed_design_pipeline(inst.design, inst.labels, k, delta, kappa_bound, alg_seed)
    wall = time.perf_counter() - t0
    err = prediction_error(inst.design, res.w_hat, inst.w_star)
    errors = {"pipeline": err, "pipeline_train": res.regression.train_error}
    if baselines:
        ols = baseline_ols_restricted(inst.design, inst.labels, inst.support)
        errors["ols_known_support"] = prediction_error(inst.design, ols.w_hat, inst.w_star)
        kappa_x = kappa_bound if source != "analytic" else kappa_bound / 2.0
        lasso = baseline_lasso_slow_rate(inst.design, inst.labels, math.sqrt(k) * kappa_x)
        errors["lasso_slow_rate"] = prediction_error(inst.design, lasso.w_hat, inst.w_star)
    flags = {"solver_converged": bool(res.regression.converged)}
    passes = res.precond.metadata.get("passes", [])
    if verify_samples:
        rep = verify_preconditioner(inst.design, res.precond, k, verify_samples, alg_seed + 1)
        flags["verification_passed"] = rep.passed
    flags["support_event"] = support_is_good(inst.design, res.precond, inst.support)
    return RunReport(
        config_echo={"mode": "fixed", "k": k, "delta": delta, "kappa_bound": kappa_bound},
        instance_summary=instance_summary(inst, kappa_bound, source),
        precond_stats={
            "ell": res.ell,
            "kappa_final": res.kappa_final,
            "rounds": len(passes),
            "accepted_updates": int(sum(p["accepted_rounds"] for p in passes)),
            "rows_rewritten": len(res.precond.rewritten),
            "wall_s": res.timings["precondition_s"],
            "regression_wall_s": res.timings["regression_s"],
            "total_wall_s": wall,
        },
        errors=errors,
        success_flags=flags,
        seeds=dict(inst.seeds) | {"algorithm_used": alg_seed},
    )


def make_gaussian_problem(family: str, d: int, k: int, sigma: float, seed: int,
                          n_blocks: int = 1, epsilon: float = 1.0, noise_kind: str = "gaussian"):
    """Covariance spec, support, ``w*`` and sampler for the Gaussian-design mode."""
    if family == "identity":
        spec = BlockSigmaSpec(d, 1, 1.0)
    elif family == "block":
        if d % n_blocks:
            raise ValueError("d must be a multiple of n_blocks")
        spec = BlockSigmaSpec(n_blocks, d // n_blocks, epsilon)
    else:
        raise ValueError(f"gaussian mode supports identity and block families, not {family!r}")
    rngs = stream_rngs(seed)
    support = random_support(d, k, rngs["support"])
    w_star = scale_ground_truth(spec, support, rngs["support"].standard_normal(k), "gaussian")
    sampler = SlrSampler(spec, w_star, NoiseModel(noise_kind, sigma), stream_seeds(seed)["noise"])
    return spec, support, w_star, sampler


def run_gaussian(family: str, d: int, k: int, sigma: float, n: int, seed: int, delta: float = 0.2,
                 n_blocks: int = 1, epsilon: float = 1.0, n_phase1: int | None = None,
                 n_holdout: int = 4096, noise_kind: str = "gaussian") -> RunReport:
    spec, support, w_star, sampler = make_gaussian_problem(family, d, k, sigma, seed, n_blocks, epsilon, noise_kind)
    alg_seed = stream_seeds(seed)["algorithm"]
    res = gaussian_design_pipeline(sampler, d, k, delta, spec.kappa(k), n_phase1, n, alg_seed,
                                   n_holdout=n_holdout, support=support)
    return RunReport(
        config_echo={"mode": "gaussian", "family": family, "d": d, "k": k, "sigma": sigma, "n": n,
                     "delta": delta, "n_blocks": n_blocks, "epsilon": epsilon, "n_phase1": res.n_phase1},
        instance_summary={"kappa_sigma": spec.kappa(k), "d": d, "k": k,
                          "support_hash": hashlib.sha256(",".join(map(str, support.indices)).encode()).hexdigest()[:16]},
        precond_stats={"ell": res.ell, "kappa_final": res.kappa_final,
                       "wall_s": res.timings["precondition_s"], "regression_wall_s": res.timings["regression_s"],
                       "phase1_scale": res.phase1_scale},
        errors={"population": res.population_error, "heldout": res.heldout_error,
                "train": res.regression.train_error},
        success_flags={"solver_converged": bool(res.regression.converged),
                       "support_event": bool(res.support_event)},
        seeds={"master": int(seed), **stream_seeds(seed)},
    )


def cell_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _bench_cell(args):
    family, d, k, n, seed, sigma, delta, params, methods = args
    noise = NoiseModel("gaussian", sigma)
    inst = make_fixed_instance(family, d, n, k, noise, seed, **params)
    kappa_bound, source = resolve_kappa_bound(inst.design, k, inst.kappa, brute_force=False)
    rows = []
    if "pipeline" in methods:
        t0 = time.perf_counter()
        res = fixed_design_pipeline(inst.design, inst.labels, k, delta, kappa_bound, inst.seeds["algorithm"])
        ms = 1e3 * (time.perf_counter() - t0)
        rows.append((family, d, k, n, seed, "pipeline", prediction_error(inst.design, res.w_hat, inst.w_star),
                     res.ell, res.kappa_final, ms))
    if "lasso" in methods:
        kappa_x = kappa_bound / 2.0 if source == "analytic" else kappa_bound
        t0 = time.perf_counter()
        res = baseline_lasso_slow_rate(inst.design, inst.labels, math.sqrt(k) * kappa_x)
        ms = 1e3 * (time.perf_counter() - t0)
        rows.append((family, d, k, n, seed, "lasso", prediction_error(inst.design, res.w_hat, inst.w_star),
                     0, "", ms))
    if "ols" in methods:
        t0 = time.perf_counter()
        res = baseline_ols_restricted(inst.design, inst.labels, inst.support)
        ms = 1e3 * (time.perf_counter() - t0)
        rows.append((family, d, k, n, seed, "ols", prediction_error(inst.design, res.w_hat, inst.w_star),
                     0, "", ms))
    return rows


def worker_count() -> int:
    raw = os.environ.get("SLR_THREADS")
    if raw is None:
        return 1
    try:
        val = int(raw)
    except ValueError as exc:
        raise ValueError(f"SLR_THREADS must be an integer, got {raw!r}") from exc
    if val < 1:
        raise ValueError("SLR_THREADS must be at least 1")
    return val


def bench(family: str, d: int, k: int, n_grid, n_seeds: int, master_seed: int, sigma: float = 0.1,
          delta: float = 0.2, methods=("pipeline", "lasso", "ols"), workers: int | None = None,
          **params) -> list[tuple]:
    """Sweep over ``n_grid`` and seeds; rows come back sorted by (N, seed, method)."""
    cells = [(family, d, k, int(n), cell_seed(master_seed, s), sigma, delta, params, tuple(methods))
             for n in n_grid for s in range(n_seeds)]
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_bench_cell, cells))
    else:
        chunks = [_bench_cell(c) for c in cells]
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (r[3], r[4], r[5]))
    return rows


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def gnuplot_script(csv_path: str, out_png: str = "bench.png") -> str:
    return f"""set datafile separator ','
set logscale xy
set xlabel 'N'
set ylabel 'prediction error'
set key top right
set terminal pngcairo size 800,600
set output '{out_png}'
plot '< grep ,pipeline, {csv_path}' using 4:7 with points title 'pipeline', \\
     '< grep ,lasso, {csv_path}' using 4:7 with points title 'lasso', \\
     '< grep ,ols, {csv_path}' using 4:7 with points title 'ols (known support)'
"""


def median_by_n(rows, method: str) -> dict[int, float]:
    out: dict[int, list] = {}
    for r in rows:
        if r[5] == method:
            out.setdefault(int(r[3]), []).append(float(r[6]))
    return {n: float(np.median(v)) for n, v in sorted(out.items())}


def loglog_slope(medians: dict[int, float]) -> float:
    ns = np.array(list(medians.keys()), dtype=float)
    es = np.array(list(medians.values()), dtype=float)
    return float(np.polyfit(np.log(ns), np.log(es), 1)[0])
