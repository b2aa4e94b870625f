"""Preconditioner search: the row-rewriting improvement pass, the iterated
square-root schedule, inverse maintenance, and a Monte Carlo checker."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import (
    EQUALITY_TOL,
    KAPPA_CAP,
    PIVOT_FLOOR,
    DesignMatrix,
    InvariantViolation,
    NumericalFailure,
    Preconditioner,
)
from .io import read_json, read_matrix_binary, write_json, write_matrix_binary
from .subproblems import max_coeff_batch, max_coeff_indexed


@dataclass
class ImproveNormConfig:
    delta: float
    gamma: float = 0.99
    k: int = 2
    d: int = 1
    universal_c: int = 10
    outer_cap: int | None = None
    inner_cap: int | None = None
    accept_threshold: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0,1), got {self.delta}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0,1), got {self.gamma}")
        if self.k < 1 or self.d < 1 or self.universal_c < 1:
            raise ValueError("k, d and universal_c must be positive")
        k, d, delta = self.k, self.d, self.delta
        if self.outer_cap is None:
            self.outer_cap = math.ceil(3 * k / delta)
        if self.inner_cap is None:
            self.inner_cap = math.ceil(self.universal_c * k / delta * math.log(d / self.gamma))
        if self.accept_threshold is None:
            self.accept_threshold = math.ceil(delta * d / (3 * k))
        self.outer_cap = max(1, int(self.outer_cap))
        self.inner_cap = max(1, int(self.inner_cap))
        self.accept_threshold = max(1, int(self.accept_threshold))


@dataclass
class VerificationReport:
    sampled_supports: int
    failures: int
    empirical_failure_rate: float
    hoeffding_halfwidth: float
    worst_coefficient: float
    property1_max_colnorm: float
    property2_ok: bool
    kappa_checked: float = math.inf
    delta_checked: float = 0.0
    failing_supports: list = field(default_factory=list)

    @property
    def property1_ok(self) -> bool:
        return self.property1_max_colnorm <= 1.0 + 1e-9

    @property
    def property3_ok(self) -> bool:
        return self.empirical_failure_rate <= self.delta_checked + self.hoeffding_halfwidth

    @property
    def passed(self) -> bool:
        return self.property1_ok and self.property2_ok and self.property3_ok

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(property1_ok=self.property1_ok, property3_ok=self.property3_ok, passed=self.passed)
        return out


def _algorithm_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def update_basis_row(precond: Preconditioner, j: int, w, anchor, check: bool = True) -> None:
    """Replace row ``j`` of the basis by ``w`` and rebuild row ``j`` of the inverse.

    ``anchor`` is the enlarged anchor set; ``supp(w)`` must lie in
    ``anchor + {j}``. Only row ``j`` of either matrix changes.
    """
    j = int(j)
    w = np.asarray(w, dtype=np.float64)
    anchor_idx = np.array(sorted(int(a) for a in anchor), dtype=np.intp)
    d = precond.d
    if j in set(anchor_idx.tolist()):
        raise ValueError(f"row {j} is in the anchor set")
    wj = w[j]
    if not abs(wj) >= PIVOT_FLOOR:
        raise NumericalFailure(f"degenerate pivot w[{j}] = {wj!r}")
    allowed = np.zeros(d, dtype=bool)
    allowed[anchor_idx] = True
    allowed[j] = True
    if np.any(w[~allowed] != 0.0):
        raise ValueError(f"update for row {j} has support outside anchor + {{j}}")
    inv = precond.inverse
    col = inv[:, j].copy()
    col[j] = 0.0
    if np.any(col != 0.0):
        raise InvariantViolation(f"inverse column {j} has off-diagonal entries before the update")

    others = np.flatnonzero(w * allowed)
    others = others[others != j]
    row = np.zeros(d)
    if others.size:
        row[anchor_idx] = -(w[others] @ inv[np.ix_(others, anchor_idx)]) / wj
    row[j] = 1.0 / wj
    if not np.all(np.isfinite(row)):
        raise NumericalFailure(f"non-finite inverse row {j}")
    precond.basis[j, :] = w
    inv[j, :] = row
    if check:
        supp = np.flatnonzero(row)
        err = row[supp] @ precond.basis[supp, :]
        err[j] -= 1.0
        if np.abs(err).max(initial=0.0) > EQUALITY_TOL * max(1.0, np.abs(row).max()):
            raise NumericalFailure(f"inverse row {j} fails the product check ({np.abs(err).max():.3e})")


def improve_norm(design: DesignMatrix, precond_in: Preconditioner, kappa_in: float,
                 cfg: ImproveNormConfig, callback: Callable | None = None,
                 check_every_update: bool = False) -> Preconditioner:
    """One improvement pass; returns a new preconditioner with bound ``sqrt(kappa_in)``.

    ``callback(event, precond)`` is invoked after each accepted round with
    ``event`` the round-log record, letting tests audit intermediate states.
    """
    d, n = design.n_cols, design.n_rows
    if precond_in.d != d:
        raise ValueError("preconditioner and design dimensions differ")
    if not kappa_in >= 1:
        raise ValueError(f"kappa_in must be >= 1, got {kappa_in}")
    k = cfg.k
    rng = _algorithm_rng(cfg.seed)
    out = precond_in.copy()
    out.sparsity_k = k
    gram = design.gram
    root = math.sqrt(kappa_in)
    cap_all = kappa_in * np.abs(np.diag(precond_in.basis))
    touched: set[int] = set()
    accepted_rounds = 0
    exit_reason = "outer_budget"
    call_id = int(out.metadata.get("calls", 0))
    log = out.round_log
    samples = 0

    for outer in range(cfg.outer_cap):
        changed = False
        for inner in range(cfg.inner_cap):
            s_prime = np.sort(rng.choice(d, size=k - 1, replace=False)) if k > 1 else np.zeros(0, np.intp)
            samples += 1
            anchor_tmp = out.anchors | set(s_prime.tolist())
            mask = np.ones(d, dtype=bool)
            mask[list(anchor_tmp)] = False
            cands = np.flatnonzero(mask)
            pivots = np.abs(np.diag(out.basis))[cands]
            live = pivots >= PIVOT_FLOOR
            cands, pivots = cands[live], pivots[live]
            vals, local, _, _ = max_coeff_batch(gram, n, s_prime, cands, cap_all[cands], pivots)
            if not np.all(np.isfinite(vals)):
                raise NumericalFailure("non-finite subproblem value during improvement")
            hit = vals > root
            n_hit = int(hit.sum())
            accept = n_hit >= cfg.accept_threshold
            record = {"call": call_id, "round": outer, "iteration": inner,
                      "s_prime": s_prime.tolist(), "j_size": n_hit, "accepted": bool(accept)}
            log.append(record)
            if not accept:
                continue
            rows = cands[hit]
            repeat = touched.intersection(rows.tolist())
            if repeat:
                raise InvariantViolation(f"rows {sorted(repeat)} rewritten twice in one pass")
            for pos, j in zip(np.flatnonzero(hit), rows):
                w = np.zeros(d)
                w[s_prime] = local[pos, :-1]
                w[j] = local[pos, -1]
                update_basis_row(out, j, w, anchor_tmp, check=True)
                if check_every_update:
                    residual = out.inverse_residual()
                    if residual > EQUALITY_TOL:
                        raise NumericalFailure(f"B B^-1 residual {residual:.3e} after row {j}")
            touched.update(rows.tolist())
            out.rewritten.update(rows.tolist())
            out.anchors = anchor_tmp
            residual = out.inverse_residual()
            if residual > EQUALITY_TOL:
                raise NumericalFailure(f"B B^-1 residual {residual:.3e} after accepted round")
            accepted_rounds += 1
            changed = True
            if callback is not None:
                callback(record, out)
            break
        if not changed:
            exit_reason = "certified"
            break
        if len(touched) >= d - len(out.anchors):
            exit_reason = "exhausted"
            break

    if accepted_rounds * cfg.accept_threshold > d:
        raise InvariantViolation("more accepted rounds than distinct rows allow")
    out.kappa_param = root
    out.delta_param = precond_in.delta_param + cfg.delta
    out.metadata["calls"] = call_id + 1
    out.metadata.setdefault("passes", []).append({
        "kappa_in": kappa_in, "kappa_out": root, "delta": cfg.delta, "gamma": cfg.gamma,
        "seed": int(cfg.seed), "accepted_rounds": accepted_rounds, "rows_rewritten": len(touched),
        "samples": samples, "exit": exit_reason, "ell": out.ell,
        "outer_cap": cfg.outer_cap, "inner_cap": cfg.inner_cap, "accept_threshold": cfg.accept_threshold,
    })
    return out


def schedule(kappa_bound: float) -> tuple[int, list[float]]:
    """Number of passes ``t`` and the kappa sequence ``kappa_0 .. kappa_t``."""
    kb = min(float(kappa_bound), KAPPA_CAP)
    if kb > 2.0:
        t = max(1, math.ceil(math.log2(math.log2(kb))))
    else:
        t = 1
    kb = max(kb, 1.0)
    seq = [kb]
    for _ in range(t):
        seq.append(math.sqrt(seq[-1]))
    return t, seq


def find_preconditioner(design: DesignMatrix, k: int, delta: float, kappa_bound: float, seed: int,
                        universal_c: int = 10, callback: Callable | None = None) -> Preconditioner:
    """Iterate :func:`improve_norm` from the identity until the kappa bound is O(1)."""
    if not design.is_normalized:
        raise ValueError("design columns must have norm at most sqrt(N)")
    d = design.n_cols
    t, seq = schedule(kappa_bound)
    delta_round = delta / t
    gamma_round = 0.99 / t
    children = np.random.SeedSequence(int(seed)).spawn(t)
    precond = Preconditioner.identity(d, k=k, kappa=seq[0], delta=0.0)
    precond.metadata.update(seed=int(seed), kappa_bound=float(kappa_bound), t=t, schedule=seq)
    for i in range(t):
        round_seed = int(children[i].generate_state(1, dtype=np.uint64)[0])
        cfg = ImproveNormConfig(delta=delta_round, gamma=gamma_round, k=k, d=d,
                                universal_c=universal_c, seed=round_seed)
        precond = improve_norm(design, precond, seq[i], cfg, callback=callback)
    precond.kappa_param = seq[-1]
    precond.delta_param = float(delta)
    return precond


def property1_max(design: DesignMatrix, precond: Preconditioner) -> float:
    """``max_i ||X B_i||^2 / N`` over basis rows ``B_i``."""
    B = precond.basis
    return float(np.max(np.einsum("ij,jk,ik->i", B, design.gram, B)) / design.n_rows)


def sample_supports(d: int, k: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``m`` uniform size-``k`` subsets of ``range(d)``, one per row, sorted."""
    keys = rng.random((m, d))
    return np.sort(np.argpartition(keys, k - 1, axis=1)[:, :k], axis=1)


def worst_coefficient_on_support(design: DesignMatrix, precond: Preconditioner, support) -> float:
    """Exact max of ``|(B^-T w)_j|`` over ``j`` outside the anchors and ``w`` in the
    unit prediction ball on ``support``."""
    S = np.asarray(sorted(int(i) for i in support), dtype=np.intp)
    rows = [np.concatenate([np.delete(S, pos), [j]]) for pos, j in enumerate(S) if j not in precond.anchors]
    if not rows:
        return 0.0
    idx = np.asarray(rows, dtype=np.intp)
    pivots = np.abs(np.diag(precond.basis))[idx[:, -1]]
    vals = max_coeff_indexed(design.gram, design.n_rows, idx, np.inf, pivots)[0]
    return float(vals.max())


def support_is_good(design: DesignMatrix, precond: Preconditioner, support) -> bool:
    """Whether ``support`` satisfies the bounded-coefficient property of ``precond``."""
    return worst_coefficient_on_support(design, precond, support) <= precond.kappa_param * (1 + 1e-9)


def verify_preconditioner(design: DesignMatrix, precond: Preconditioner, k: int, n_samples: int,
                          seed: int, kappa: float | None = None, delta: float | None = None,
                          input_precond: Preconditioner | None = None,
                          kappa_in: float | None = None) -> VerificationReport:
    """Check the three goodness properties; the third one by sampling supports.

    For each sampled support and each coordinate outside the anchor set the
    exact worst-case transformed coefficient is computed. With
    ``input_precond`` and ``kappa_in`` the check is restricted to vectors
    that obey the input bound, which is what a single improvement pass
    guarantees when the design has exactly collinear columns.
    """
    if n_samples < 1:
        raise ValueError("need at least one sampled support")
    d, n = design.n_cols, design.n_rows
    kappa = precond.kappa_param if kappa is None else float(kappa)
    delta = precond.delta_param if delta is None else float(delta)
    p1 = property1_max(design, precond)
    p2 = not precond.structure_violations() and precond.inverse_residual() <= EQUALITY_TOL

    rng = _algorithm_rng(seed)
    supports = sample_supports(d, k, n_samples, rng)
    in_anchor = np.zeros(d, dtype=bool)
    in_anchor[precond.anchor_array] = True
    sup_ids, idx_rows = [], []
    for s_id, S in enumerate(supports):
        for pos, j in enumerate(S):
            if in_anchor[j]:
                continue
            sup_ids.append(s_id)
            idx_rows.append(np.concatenate([np.delete(S, pos), [j]]))
    worst = 0.0
    failures = 0
    failing: list = []
    if idx_rows:
        idx = np.asarray(idx_rows, dtype=np.intp)
        js = idx[:, -1]
        pivots = np.abs(np.diag(precond.basis))[js]
        if input_precond is not None:
            caps = float(kappa_in) * np.abs(np.diag(input_precond.basis))[js]
        else:
            caps = np.full(js.size, np.inf)
        vals = np.empty(js.size)
        for lo in range(0, js.size, 50000):
            sl = slice(lo, lo + 50000)
            vals[sl] = max_coeff_indexed(design.gram, n, idx[sl], caps[sl], pivots[sl])[0]
        worst = float(vals.max())
        per_support = np.full(n_samples, -np.inf)
        np.maximum.at(per_support, np.asarray(sup_ids), vals)
        # relative slack absorbs rounding in the closed-form optimum
        failed = per_support > kappa * (1 + 1e-9)
        failures = int(failed.sum())
        failing = [supports[i].tolist() for i in np.flatnonzero(failed)]
    return VerificationReport(
        sampled_supports=n_samples,
        failures=failures,
        empirical_failure_rate=failures / n_samples,
        hoeffding_halfwidth=math.sqrt(math.log(40.0) / (2 * n_samples)),
        worst_coefficient=worst,
        property1_max_colnorm=p1,
        property2_ok=bool(p2),
        kappa_checked=kappa,
        delta_checked=delta,
        failing_supports=failing,
    )


def save_preconditioner(precond: Preconditioner, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_binary(out / "basis.slrm", precond.basis)
    write_matrix_binary(out / "inverse.slrm", precond.inverse)
    meta = {
        "anchors": sorted(int(a) for a in precond.anchors),
        "rewritten": sorted(int(a) for a in precond.rewritten),
        "k": precond.sparsity_k,
        "delta": precond.delta_param,
        "kappa": precond.kappa_param if math.isfinite(precond.kappa_param) else None,
        "seed": precond.metadata.get("seed"),
        "metadata": {key: val for key, val in precond.metadata.items() if key != "seed"},
    }
    write_json(out / "meta.json", meta)
    with open(out / "rounds.jsonl", "w") as fh:
        for rec in precond.round_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_preconditioner(in_dir) -> Preconditioner:
    src = Path(in_dir)
    meta = read_json(src / "meta.json")
    basis = read_matrix_binary(src / "basis.slrm")
    inverse = read_matrix_binary(src / "inverse.slrm")
    if basis.shape != inverse.shape or basis.shape[0] != basis.shape[1]:
        raise ValueError("basis and inverse must be matching square matrices")
    rounds = []
    log_path = src / "rounds.jsonl"
    if log_path.exists():
        rounds = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    extra = dict(meta.get("metadata", {}))
    extra["seed"] = meta.get("seed")
    kappa = meta.get("kappa")
    return Preconditioner(
        basis=basis,
        inverse=inverse,
        anchors=set(meta["anchors"]),
        kappa_param=math.inf if kappa is None else float(kappa),
        delta_param=float(meta["delta"]),
        sparsity_k=int(meta["k"]),
        rewritten=set(meta.get("rewritten", [])),
        round_log=rounds,
        metadata=extra,
    )
