"""Partially l1-constrained least squares and the end-to-end pipelines."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import DesignMatrix, NumericalFailure, Preconditioner, Support, as_index_array
from .preconditioner import find_preconditioner, support_is_good
from .subproblems import PredictionBall, project_partial_l1


@dataclass
class ConstrainedProgramSpec:
    """``min (1/N)||y - Xw||^2`` s.t. ``||w outside free_set||_1 <= l1_radius``
    and ``||Xw|| <= prediction_radius``."""

    free_set: frozenset = frozenset()
    l1_radius: float = 1.0
    prediction_radius: float | None = None  # None means sqrt(N)
    max_iters: int = 50000
    tol: float = 1e-9
    kkt_tol: float = 1e-7
    use_prediction_constraint: bool = True
    check_every: int = 10

    def __post_init__(self):
        self.free_set = frozenset(int(i) for i in self.free_set)
        if not self.l1_radius >= 0:
            raise ValueError(f"l1_radius must be non-negative, got {self.l1_radius}")
        if self.prediction_radius is not None and not self.prediction_radius > 0:
            raise ValueError(f"prediction_radius must be positive, got {self.prediction_radius}")


@dataclass
class RegressionResult:
    w_hat: np.ndarray
    train_error: float
    objective_trace: list
    kkt_residual: float
    iterations_used: int
    converged: bool = True
    restarts: int = 0

    def to_record(self, w_path: str | None = None, include_trace: bool = False) -> dict:
        """JSON-compatible record; ``w_hat`` goes inline when ``d <= 128``."""
        rec = {
            "train_error": float(self.train_error),
            "kkt_residual": float(self.kkt_residual),
            "iterations_used": int(self.iterations_used),
            "converged": bool(self.converged),
            "restarts": int(self.restarts),
            "d": int(self.w_hat.size),
        }
        if self.w_hat.size <= 128 or w_path is None:
            rec["w_hat"] = [float(v) for v in self.w_hat]
        else:
            np.savetxt(w_path, self.w_hat[None, :], delimiter=",", fmt="%.17g")
            rec["w_hat_file"] = str(w_path)
        if include_trace:
            rec["objective_trace"] = [float(v) for v in self.objective_trace]
        return rec


class _Feasible:
    """Projection onto the intersection of the two constraint sets."""

    def __init__(self, d, free_set, l1_radius, ball: PredictionBall | None,
                 max_sweeps=200, sweep_tol=1e-10):
        self.mask = np.ones(d, dtype=bool)
        if free_set:
            self.mask[np.fromiter(free_set, dtype=np.intp)] = False
        self.free = sorted(free_set)
        self.radius = float(l1_radius)
        self.ball = ball
        self.max_sweeps = max_sweeps
        self.sweep_tol = sweep_tol
        self.sweeps_used = 0

    def in_l1(self, w, slack=1e-12):
        return np.abs(w[self.mask]).sum() <= self.radius * (1 + slack) + 1e-300

    def p1(self, w):
        return project_partial_l1(w, self.free, self.radius)

    def __call__(self, z):
        a = self.p1(z)
        if self.ball is None or self.ball.contains(a, 1e-12):
            return a
        b = self.ball.project(z)
        if self.in_l1(b):
            return b
        # Dykstra alternation
        x = z.copy()
        p = np.zeros_like(z)
        q = np.zeros_like(z)
        for sweep in range(self.max_sweeps):
            yk = self.p1(x + p)
            p = x + p - yk
            x_new = self.ball.project(yk + q)
            q = yk + q - x_new
            # x alone can sit still while the corrections keep moving; the
            # corrections stop only when both set-to-set gaps close
            gap = np.linalg.norm(x - yk) + np.linalg.norm(yk - x_new)
            x = x_new
            if gap <= self.sweep_tol * (1 + np.linalg.norm(x)):
                break
        self.sweeps_used += sweep + 1
        return x


def constrained_least_squares(design: DesignMatrix, y, spec: ConstrainedProgramSpec,
                              w0=None) -> RegressionResult:
    """Accelerated projected gradient with function-value restart."""
    y = np.asarray(y, dtype=np.float64)
    n, d = design.n_rows, design.n_cols
    if y.shape != (n,):
        raise ValueError(f"labels have shape {y.shape}, expected ({n},)")
    if not np.all(np.isfinite(y)):
        raise NumericalFailure("non-finite labels")
    G = design.gram
    Xty = design.data.T @ y
    yy = float(y @ y)
    radius = math.sqrt(n) if spec.prediction_radius is None else float(spec.prediction_radius)
    ball = PredictionBall(G, radius) if spec.use_prediction_constraint else None
    proj = _Feasible(d, spec.free_set, spec.l1_radius, ball)

    lam_max = ball.lam_max if ball is not None else float(np.linalg.eigvalsh(G)[-1])

    def f(w):
        return (yy - 2.0 * w @ Xty + w @ (G @ w)) / n

    def grad(w):
        return 2.0 * (G @ w - Xty) / n

    x = proj(np.zeros(d) if w0 is None else np.asarray(w0, dtype=np.float64))
    fx = f(x)
    trace = [fx]
    if lam_max <= 0:
        return RegressionResult(x, max(fx, 0.0), trace, 0.0, 0, True)
    step = n / (2.0 * lam_max)

    def kkt(w):
        return float(np.linalg.norm(w - proj(w - step * grad(w))) / step)

    yk = x.copy()
    t = 1.0
    restarts = 0
    res = math.inf
    it = 0
    converged = False
    for it in range(1, spec.max_iters + 1):
        x_new = proj(yk - step * grad(yk))
        f_new = f(x_new)
        if f_new > fx + spec.tol * 1e-3 * (1 + abs(fx)):
            # momentum overshot: restart from a plain projected-gradient step
            restarts += 1
            t = 1.0
            x_new = proj(x - step * grad(x))
            f_new = f(x_new)
            if f_new > fx:
                # numerically stalled at the optimum
                x_new, f_new = x, fx
        elif float((yk - x_new) @ (x_new - x)) > 0:
            # gradient-based restart: momentum points uphill
            restarts += 1
            t = 1.0
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        yk = x_new + ((t - 1) / t_new) * (x_new - x)
        x, fx, t = x_new, f_new, t_new
        trace.append(fx)
        if not math.isfinite(fx):
            raise NumericalFailure("objective became non-finite")
        if it % spec.check_every == 0:
            res = kkt(x)
            if res <= spec.kkt_tol:
                converged = True
                break
    else:
        res = kkt(x)
        converged = res <= spec.kkt_tol
    # the trace records accepted iterates only, so it is monotone up to rounding
    train = float(np.mean((y - design.data @ x) ** 2))
    return RegressionResult(x, train, trace, res, it, converged, restarts)


def _transformed(design: DesignMatrix, precond: Preconditioner) -> DesignMatrix:
    if precond.d != design.n_cols:
        raise ValueError("preconditioner and design dimensions differ")
    return DesignMatrix(design.data @ precond.basis.T)


def preconditioned_regression(design: DesignMatrix, y, precond: Preconditioner,
                              budget_multiplier: float = 1.0, **spec_kw) -> RegressionResult:
    """Solve in the transformed basis ``Z = X B^T`` and map back with ``B^T``."""
    y = np.asarray(y, dtype=np.float64)
    Z = _transformed(design, precond)
    budget = budget_multiplier * precond.sparsity_k * precond.kappa_param
    spec = ConstrainedProgramSpec(free_set=frozenset(precond.anchors), l1_radius=budget,
                                  prediction_radius=math.sqrt(design.n_rows), **spec_kw)
    res = constrained_least_squares(Z, y, spec)
    u_hat = res.w_hat
    w_hat = precond.basis.T @ u_hat
    res.w_hat = w_hat
    res.train_error = float(np.mean((y - design.data @ w_hat) ** 2))
    return res


@dataclass
class PipelineResult:
    regression: RegressionResult
    precond: Preconditioner
    timings: dict = field(default_factory=dict)

    @property
    def w_hat(self):
        return self.regression.w_hat

    @property
    def ell(self) -> int:
        return self.precond.ell

    @property
    def kappa_final(self) -> float:
        return self.precond.kappa_param


def fixed_design_pipeline(design: DesignMatrix, y, k: int, delta: float, kappa_bound: float,
                          seed: int, budget_multiplier: float = 1.0, **spec_kw) -> PipelineResult:
    """Preconditioner search followed by the constrained regression."""
    t0 = time.perf_counter()
    precond = find_preconditioner(design, k, delta, kappa_bound, seed)
    t1 = time.perf_counter()
    reg = preconditioned_regression(design, y, precond, budget_multiplier, **spec_kw)
    t2 = time.perf_counter()
    return PipelineResult(reg, precond, {"precondition_s": t1 - t0, "regression_s": t2 - t1})


@dataclass
class GaussianPipelineResult(PipelineResult):
    population_error: float | None = None
    heldout_error: float | None = None
    n_phase1: int = 0
    n_phase2: int = 0
    phase1_scale: float = 0.5
    support_event: bool | None = None


def default_phase1_size(k: int, d: int) -> int:
    return math.ceil(100 * k * math.log(d))


def gaussian_design_pipeline(sampler, d: int, k: int, delta: float, kappa_sigma_bound: float,
                             n_phase1: int | None, n_phase2: int, seed: int,
                             n_holdout: int = 4096, budget_multiplier: float = 1.0,
                             support=None, **spec_kw) -> GaussianPipelineResult:
    """Learn a preconditioner from unlabeled rows, then regress on fresh labeled rows.

    ``sampler`` must provide ``draw_covariates(n)`` and ``draw(n) -> (X, y)``;
    if it exposes ``covariance`` and ``w_star`` the exact population error is
    reported, and ``held-out`` error is measured on fresh noise-free rows.
    When the true ``support`` is passed, ``support_event`` records whether
    it meets the coefficient bound on the phase-1 design.
    """
    n1 = default_phase1_size(k, d) if n_phase1 is None else int(n_phase1)
    t0 = time.perf_counter()
    X1 = np.asarray(sampler.draw_covariates(n1), dtype=np.float64)
    if X1.shape != (n1, d):
        raise ValueError(f"sampler returned shape {X1.shape}, expected {(n1, d)}")
    scale = 0.5
    peak = np.linalg.norm(X1, axis=0).max()
    if scale * peak > math.sqrt(n1):
        # concentration failed on this draw; shrink just enough to stay normalized
        scale = math.sqrt(n1) / peak
    design1 = DesignMatrix(scale * X1)
    P = find_preconditioner(design1, k, delta, 2.0 * kappa_sigma_bound, seed)
    event = None if support is None else support_is_good(design1, P, support)
    precond = P.scaled(0.5)
    precond.kappa_param = 2.0 * P.kappa_param
    t1 = time.perf_counter()

    X2, y2 = sampler.draw(n_phase2)
    X2 = np.asarray(X2, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    Z = DesignMatrix(0.5 * (X2 @ precond.basis.T))
    spec = ConstrainedProgramSpec(
        free_set=frozenset(precond.anchors),
        l1_radius=2.0 * budget_multiplier * k * precond.kappa_param,
        prediction_radius=2.0 * math.sqrt(n_phase2),
        **spec_kw,
    )
    reg = constrained_least_squares(Z, y2, spec)
    u_hat = 0.5 * reg.w_hat
    w_hat = precond.basis.T @ u_hat
    reg.w_hat = w_hat
    reg.train_error = float(np.mean((y2 - X2 @ w_hat) ** 2))
    t2 = time.perf_counter()

    pop = held = None
    w_star = getattr(sampler, "w_star", None)
    if w_star is not None:
        diff = w_hat - np.asarray(w_star)
        cov = getattr(sampler, "covariance", None)
        if cov is not None:
            pop = float(diff @ cov @ diff)
        if n_holdout > 0:
            Xh = np.asarray(sampler.draw_covariates(n_holdout, stream="holdout"))
            held = float(np.mean((Xh @ diff) ** 2))
    return GaussianPipelineResult(
        regression=reg, precond=precond,
        timings={"precondition_s": t1 - t0, "regression_s": t2 - t1},
        population_error=pop, heldout_error=held, n_phase1=n1, n_phase2=int(n_phase2),
        phase1_scale=scale, support_event=event,
    )


def baseline_ols_restricted(design: DesignMatrix, y, support) -> RegressionResult:
    """Least squares on the given columns via a rank-tolerant pseudo-inverse."""
    y = np.asarray(y, dtype=np.float64)
    d = design.n_cols
    idx = as_index_array(support, d)
    w = np.zeros(d)
    if idx.size:
        w[idx] = np.linalg.pinv(design.data[:, idx], rcond=1e-10) @ y
    train = float(np.mean((y - design.data @ w) ** 2))
    return RegressionResult(w, train, [train], 0.0, 0, True)


def baseline_lasso_slow_rate(design: DesignMatrix, y, l1_budget: float, **spec_kw) -> RegressionResult:
    """Plain constrained Lasso (no anchor set) with a loose prediction constraint."""
    spec = ConstrainedProgramSpec(free_set=frozenset(), l1_radius=l1_budget,
                                  prediction_radius=10.0 * math.sqrt(design.n_rows), **spec_kw)
    return constrained_least_squares(design, y, spec)


def prediction_error(design: DesignMatrix, w_hat, w_star) -> float:
    """``(1/N) ||X (w_hat - w_star)||^2``."""
    diff = np.asarray(w_hat) - np.asarray(w_star)
    return float(np.mean((design.data @ diff) ** 2))
