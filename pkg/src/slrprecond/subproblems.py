"""Exact solvers for the small programs used by the preconditioner and the
regression solver.

The max-coefficient program is solved in closed form with one k x k
eigendecomposition per candidate coordinate, batched across candidates.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .core import RANK_TOL, DesignMatrix, NumericalFailure, as_index_array

ENUM_BUDGET = 10**6
# a null-space component of e_j below this is treated as rounding noise
NULL_COMPONENT_TOL = 1e-8


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class SubproblemResult:
    value: float
    maximizer: np.ndarray
    bounded: bool
    active_cap: bool


def _null_floor(lam_max, n_rows, rank_tol):
    return np.maximum(rank_tol * lam_max, 1e-14 * n_rows)


def max_coeff_batch(gram_full, n_rows, rest, cands, caps, pivots, rank_tol=RANK_TOL):
    """Solve the max-coefficient program for many candidate coordinates.

    For every ``j`` in ``cands`` maximize ``|v_j| / pivot_j`` over ``v``
    supported on ``rest + [j]`` with ``v^T G v <= N`` and ``|v_j| <= cap_j``.

    Returns ``(values, local, bounded, active)`` where ``local`` has shape
    ``(m, len(rest) + 1)`` and holds maximizer coordinates in the order
    ``rest..., j``.
    """
    rest = np.asarray(rest, dtype=np.intp)
    cands = np.asarray(cands, dtype=np.intp)
    idx = np.empty((cands.size, rest.size + 1), dtype=np.intp)
    idx[:, :rest.size] = rest
    idx[:, rest.size] = cands
    return max_coeff_indexed(gram_full, n_rows, idx, caps, pivots, rank_tol)


def max_coeff_indexed(gram_full, n_rows, idx, caps, pivots, rank_tol=RANK_TOL):
    """Same as :func:`max_coeff_batch` but each row of ``idx`` is its own
    support, with the objective coordinate in the last column."""
    idx = np.asarray(idx, dtype=np.intp)
    m, k = idx.shape
    r = k - 1
    caps = np.broadcast_to(np.asarray(caps, dtype=np.float64), (m,))
    pivots = np.broadcast_to(np.abs(np.asarray(pivots, dtype=np.float64)), (m,))
    if m == 0:
        return np.zeros(0), np.zeros((0, k)), np.zeros(0, bool), np.zeros(0, bool)

    G = gram_full[idx[:, :, None], idx[:, None, :]]
    if not np.all(np.isfinite(G)):
        raise NumericalFailure("non-finite Gram entries")
    lam, V = np.linalg.eigh(G)
    floor = _null_floor(lam[:, -1:], n_rows, rank_tol)
    null = lam <= floor
    ej = V[:, r, :]  # j-th coordinate of every eigenvector, shape (m, k)

    null_sq = np.where(null, ej * ej, 0.0).sum(axis=1)
    unbounded = null_sq > NULL_COMPONENT_TOL**2

    inv_lam = np.where(null, 0.0, 1.0 / np.where(null, 1.0, lam))
    s = (ej * ej * inv_lam).sum(axis=1)  # e_j^T G^+ e_j
    with np.errstate(divide="ignore", invalid="ignore"):
        v_b = np.einsum("mab,mb->ma", V, ej * inv_lam) * (math.sqrt(n_rows) / np.sqrt(s))[:, None]
    m_val = np.sqrt(n_rows * s)

    # null direction with the largest j-component: projection of e_j on the null space
    n_vec = np.einsum("mab,mb->ma", V, np.where(null, ej, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        v_u = n_vec / null_sq[:, None]  # scaled so that v_j = 1

    local = np.zeros((m, k))
    coeff = np.zeros(m)
    active = np.zeros(m, dtype=bool)

    b = ~unbounded
    cap_b = caps[b]
    bind = cap_b < m_val[b]
    scale = np.where(bind, cap_b / np.where(m_val[b] > 0, m_val[b], 1.0), 1.0)
    local[b] = v_b[b] * scale[:, None]
    coeff[b] = np.minimum(m_val[b], cap_b)
    active[b] = bind

    u = unbounded
    if np.any(u):
        cap_u = caps[u]
        finite = np.isfinite(cap_u)
        local[u] = v_u[u] * np.where(finite, cap_u, 1.0)[:, None]
        coeff[u] = np.where(finite, cap_u, np.inf)
        active[u] = finite

    # enforce ||X v|| <= sqrt(N) exactly; only bites for near-null directions
    quad = np.einsum("ma,mab,mb->m", local, G, local)
    over = quad > n_rows
    if np.any(over):
        local[over] *= np.sqrt(n_rows / quad[over])[:, None]
        fix = over & np.isfinite(coeff)
        coeff[fix] = np.abs(local[fix, r])
        active[fix] = False

    if not np.all(np.isfinite(local)):
        bad = ~np.all(np.isfinite(local), axis=1)
        if np.any(bad & ~(unbounded & ~np.isfinite(caps))):
            raise NumericalFailure("non-finite maximizer")
    values = coeff / np.where(pivots > 0, pivots, np.nan)
    return values, local, ~unbounded, active


def max_support_coefficient(design: DesignMatrix, support_rest, j: int, cap_c: float = math.inf,
                            pivot_scale: float = 1.0, rank_tol: float = RANK_TOL) -> SubproblemResult:
    """Largest ``|v_j| / pivot_scale`` over ``v`` on ``support_rest + {j}`` with
    ``||X v|| <= sqrt(N)`` and ``|v_j| <= cap_c``."""
    d = design.n_cols
    rest = as_index_array(support_rest, d)
    j = int(j)
    if not 0 <= j < d:
        raise ValueError(f"j={j} out of range")
    if j in set(rest.tolist()):
        raise ValueError(f"j={j} is already in the support")
    if not cap_c > 0:
        raise ValueError(f"cap must be positive, got {cap_c}")
    if not pivot_scale > 0:
        raise ValueError(f"pivot_scale must be positive, got {pivot_scale}")
    vals, local, bounded, active = max_coeff_batch(
        design.gram, design.n_rows, rest, [j], [cap_c], [pivot_scale], rank_tol
    )
    v = np.zeros(d)
    v[rest] = local[0, :-1]
    v[j] = local[0, -1]
    return SubproblemResult(float(vals[0]), v, bool(bounded[0]), bool(active[0]))


def _min_eig_batch(gram, combos, n_rows, rank_tol):
    G = gram[combos[:, :, None], combos[:, None, :]]
    lam = np.linalg.eigvalsh(G)
    return lam[:, 0], lam[:, -1]


def _kappa_from_matrix(mat_cols, scale, rank_tol):
    """sqrt(scale) / sigma_min via SVD; +inf when numerically rank deficient."""
    if mat_cols.shape[0] < mat_cols.shape[1]:
        return math.inf  # more columns than rows
    sv = np.linalg.svd(mat_cols, compute_uv=False)
    if sv[-1] <= rank_tol * sv[0] or sv[-1] == 0.0:
        return math.inf
    return math.sqrt(scale) / sv[-1]


def _enumerate(gram, d, k, n_scale, sqrt_fn, rank_tol, chunk=20000):
    total = math.comb(d, k)
    if total > ENUM_BUDGET:
        raise BudgetExceeded(f"C({d},{k}) = {total} supports exceeds the budget of {ENUM_BUDGET}")
    best = 0.0
    it = itertools.combinations(range(d), k)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            break
        combos = np.asarray(block, dtype=np.intp)
        lo, hi = _min_eig_batch(gram, combos, n_scale, rank_tol)
        if np.any(hi <= 0):
            return math.inf
        # eigvalsh on the Gram loses half the digits; recheck suspicious supports by SVD
        shaky = lo <= 1e-8 * hi
        ok = ~shaky
        if np.any(ok):
            best = max(best, float(np.sqrt(n_scale / lo[ok]).max()))
        for row in combos[shaky]:
            val = sqrt_fn(row)
            if math.isinf(val):
                return math.inf
            best = max(best, val)
    return best


def sparse_condition_number(design: DesignMatrix, k: int, rank_tol: float = RANK_TOL) -> float:
    """Max of ``||w||`` over k-sparse ``w`` with ``||X w|| = sqrt(N)``, by enumeration."""
    d, n = design.n_cols, design.n_rows
    if k < 1 or k > d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    data = design.data
    return _enumerate(design.gram, d, k, float(n),
                      lambda S: _kappa_from_matrix(data[:, S], n, rank_tol), rank_tol)


def covariance_condition_number(sigma, k: int, rank_tol: float = RANK_TOL) -> float:
    """Population analogue: max of ``||w||`` over k-sparse ``w`` with ``w^T Sigma w = 1``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    d = sigma.shape[0]
    if k < 1 or k > d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")

    def exact(S):
        sub = sigma[np.ix_(S, S)]
        lam = np.linalg.eigvalsh(sub)
        if lam[0] <= rank_tol * lam[-1]:
            return math.inf
        return 1.0 / math.sqrt(lam[0])

    return _enumerate(sigma, d, k, 1.0, exact, rank_tol)


def project_l1_ball(v, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{x : ||x||_1 <= radius}`` (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    mu = np.sort(a)[::-1]
    cs = np.cumsum(mu) - radius
    ind = np.arange(1, v.size + 1)
    pos = np.flatnonzero(mu - cs / ind > 0)
    rho = ind[pos[-1]] if pos.size else 1  # empty only when radius underflows
    theta = cs[rho - 1] / rho
    return np.sign(v) * np.maximum(a - theta, 0.0)


def project_partial_l1(w, free_set, radius: float) -> np.ndarray:
    """Project onto ``{u : ||u outside free_set||_1 <= radius}``; free coordinates pass through."""
    w = np.asarray(w, dtype=np.float64)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    mask = np.ones(w.size, dtype=bool)
    mask[as_index_array(sorted(free_set) if isinstance(free_set, set) else free_set)] = False
    out = w.copy()
    out[mask] = project_l1_ball(w[mask], radius)
    return out


class PredictionBall:
    """Projection onto ``{u : ||X u|| <= r}`` using a cached eigenbasis of ``X^T X``."""

    def __init__(self, gram, radius: float):
        if not radius > 0:
            raise ValueError("radius must be positive")
        gram = np.asarray(gram, dtype=np.float64)
        if not np.all(np.isfinite(gram)):
            raise NumericalFailure("non-finite Gram")
        s, V = np.linalg.eigh(gram)
        s = np.clip(s, 0.0, None)
        keep = s > 1e-14 * max(s[-1], 1e-300)
        self.s = s[keep]
        self.V = V[:, keep]
        self.gram = gram
        self.radius = float(radius)
        self.lam_max = float(s[-1])

    def norm_sq(self, u) -> float:
        return float(u @ self.gram @ u)

    def contains(self, u, slack: float = 0.0) -> bool:
        return self.norm_sq(u) <= (self.radius * (1 + slack)) ** 2

    def multiplier(self, w) -> float:
        """The root ``lambda`` of the projection (0 when ``w`` is inside)."""
        return self._solve(w)[1]

    def _solve(self, w):
        w = np.asarray(w, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise NumericalFailure("non-finite input to ball projection")
        r2 = self.radius**2
        c = self.V.T @ w
        sc2 = self.s * c * c
        if sc2.sum() <= r2:
            return w.copy(), 0.0
        phi = lambda lam: float(np.sum(sc2 / (1.0 + lam * self.s) ** 2)) - r2
        hi = float(w @ w) / (4.0 * r2)
        while phi(hi) > 0:  # rounding guard
            hi *= 2.0
        lam = optimize.brentq(phi, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
        u = w - self.V @ ((lam * self.s / (1.0 + lam * self.s)) * c)
        nrm = math.sqrt(max(self.norm_sq(u), 0.0))
        if nrm > self.radius:
            u *= self.radius / nrm
        return u, lam

    def project(self, w) -> np.ndarray:
        return self._solve(w)[0]


def project_prediction_ball(w, design: DesignMatrix, radius: float) -> np.ndarray:
    """Euclidean projection of ``w`` onto ``{u : ||X u|| <= radius}``."""
    return PredictionBall(design.gram, radius).project(w)
