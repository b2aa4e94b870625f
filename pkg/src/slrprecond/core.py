"""Shared domain types and elementary linear algebra.

Everything downstream works on a :class:`DesignMatrix` (an ``N x d`` array
with cached column norms) and a :class:`Preconditioner` (a basis-change
matrix ``B`` together with an explicitly maintained inverse and an anchor
set ``I``).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

RANK_TOL = 1e-10
EQUALITY_TOL = 1e-8
SOLVER_TOL = 1e-9
PIVOT_FLOOR = 1e-300
# float64 cannot resolve sparse condition numbers much beyond this.
KAPPA_CAP = 1e12


class NumericalFailure(ArithmeticError):
    """Raised when an algorithm produces non-finite or inconsistent numbers."""


class InvariantViolation(AssertionError):
    """A structural invariant of the preconditioner was broken."""


class DesignMatrix:
    """An ``N x d`` design matrix; rows are samples, columns are features.

    The array is copied and frozen on construction so cached quantities
    (column norms, Gram matrix) stay valid.
    """

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"design must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"design must be non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("design has non-finite entries")
        arr.flags.writeable = False
        self.data = arr
        self.column_norms = np.linalg.norm(arr, axis=0)
        self.column_norms.flags.writeable = False

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_normalized(self) -> bool:
        """True when every column norm is at most sqrt(N)."""
        return bool(self.column_norms.max() <= math.sqrt(self.n_rows) * (1 + 1e-9))

    @cached_property
    def gram(self) -> np.ndarray:
        g = self.data.T @ self.data
        g = 0.5 * (g + g.T)
        g.flags.writeable = False
        return g

    def scaled(self, factor: float) -> "DesignMatrix":
        return DesignMatrix(self.data * factor)

    def __repr__(self) -> str:
        return f"DesignMatrix(N={self.n_rows}, d={self.n_cols})"


@dataclass(frozen=True)
class Support:
    """Sorted, duplicate-free index set inside ``[0, d)``."""

    indices: tuple[int, ...]
    d: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"support must be strictly increasing: {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.d):
            raise ValueError(f"support indices out of range [0, {self.d}): {idx}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices: Iterable[int], d: int) -> "Support":
        return cls(tuple(sorted(set(int(i) for i in indices))), d)

    @property
    def k(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, item) -> bool:
        return int(item) in self.indices

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.intp)


class NoiseKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    ZERO = "zero"


@dataclass(frozen=True)
class NoiseModel:
    """Mean-zero sigma-sub-gaussian label noise."""

    kind: NoiseKind = NoiseKind.GAUSSIAN
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be a finite non-negative number, got {self.sigma}")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind is NoiseKind.ZERO or self.sigma == 0.0:
            # still consume nothing so the stream is independent of sigma=0 runs
            return np.zeros(n)
        if self.kind is NoiseKind.GAUSSIAN:
            return self.sigma * rng.standard_normal(n)
        return self.sigma * rng.choice(np.array([-1.0, 1.0]), size=n)


@dataclass
class Preconditioner:
    """Basis change ``B`` with its explicitly maintained inverse and anchor set.

    ``basis`` and ``inverse`` are mutated in place by
    :func:`slrprecond.preconditioner.update_basis_row`; nothing else should
    write to them.
    """

    basis: np.ndarray
    inverse: np.ndarray
    anchors: set[int] = field(default_factory=set)
    kappa_param: float = math.inf
    delta_param: float = 0.0
    sparsity_k: int = 1
    # rows rewritten by improve_norm at any point; these must stay k-sparse
    rewritten: set[int] = field(default_factory=set)
    round_log: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, d: int, k: int = 1, kappa: float = math.inf, delta: float = 0.0) -> "Preconditioner":
        return cls(np.eye(d), np.eye(d), set(), float(kappa), float(delta), int(k))

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    @property
    def ell(self) -> int:
        return len(self.anchors)

    @property
    def anchor_array(self) -> np.ndarray:
        return np.array(sorted(self.anchors), dtype=np.intp)

    def copy(self) -> "Preconditioner":
        return Preconditioner(
            self.basis.copy(),
            self.inverse.copy(),
            set(self.anchors),
            self.kappa_param,
            self.delta_param,
            self.sparsity_k,
            set(self.rewritten),
            [dict(r) for r in self.round_log],
            dict(self.metadata),
        )

    def scaled(self, factor: float) -> "Preconditioner":
        """Return ``(factor * B, I)``; the inverse is rescaled to match."""
        out = self.copy()
        out.basis = self.basis * factor
        out.inverse = self.inverse / factor
        return out

    def inverse_residual(self) -> float:
        """Max-entry error of ``B @ B^-1 - Id``."""
        return float(np.abs(self.basis @ self.inverse - np.eye(self.d)).max())

    def structure_violations(self) -> list[str]:
        """Exact structural checks on the inverse and row sparsity. Empty list means OK."""
        problems = []
        d = self.d
        in_anchor = np.zeros(d, dtype=bool)
        in_anchor[self.anchor_array] = True
        off = self.inverse.copy()
        off[:, in_anchor] = 0.0
        np.fill_diagonal(off, 0.0)
        bad_rows = np.flatnonzero(np.any(off != 0.0, axis=1))
        if bad_rows.size:
            problems.append(f"inverse rows {bad_rows[:10].tolist()} leave I ∪ {{i}}")
        free = ~in_anchor
        prod = np.diag(self.inverse)[free] * np.diag(self.basis)[free]
        if prod.size and np.abs(prod - 1.0).max() > EQUALITY_TOL:
            problems.append("inverse[i,i] * basis[i,i] != 1 for some i outside I")
        nnz = np.count_nonzero(self.basis, axis=1)
        limit = max(self.ell + 1, self.sparsity_k)
        if nnz.max(initial=0) > limit:
            problems.append(f"basis row with {nnz.max()} nonzeros exceeds {limit}")
        if self.rewritten:
            rw = np.array(sorted(self.rewritten))
            if nnz[rw].max() > self.sparsity_k:
                problems.append("a rewritten basis row has more than k nonzeros")
        return problems


def as_index_array(support: Support | Sequence[int] | np.ndarray, d: int | None = None) -> np.ndarray:
    if isinstance(support, Support):
        return support.as_array()
    idx = np.asarray(list(support) if not isinstance(support, np.ndarray) else support, dtype=np.intp).ravel()
    if d is not None and idx.size and (idx.min() < 0 or idx.max() >= d):
        raise ValueError(f"support indices out of range [0, {d})")
    if np.unique(idx).size != idx.size:
        raise ValueError("support has duplicate indices")
    return idx


def gram_on_support(design: DesignMatrix, support) -> np.ndarray:
    """``X_S^T X_S`` for the columns in ``support`` (in the given order)."""
    idx = as_index_array(support, design.n_cols)
    if idx.size == 0:
        return np.zeros((0, 0))
    cols = design.data[:, idx]
    g = cols.T @ cols
    return 0.5 * (g + g.T)


def apply_basis_change(design: DesignMatrix, precond: Preconditioner) -> DesignMatrix:
    """Transformed dataset ``Z = X B^T``."""
    if precond.d != design.n_cols:
        raise ValueError(f"basis is {precond.d}x{precond.d} but design has {design.n_cols} columns")
    return DesignMatrix(design.data @ precond.basis.T)


def coeff_under_inverse_transpose(precond: Preconditioner, w, j: int) -> float:
    """``(B^{-T} w)_j`` for ``j`` outside the anchor set, without the inverse.

    Uses ``(B^{-T} w)_j = w_j / B_jj``, valid whenever inverse rows are
    supported on ``I ∪ {i}``.
    """
    j = int(j)
    if j in precond.anchors:
        raise ValueError(f"coordinate {j} is an anchor; use the full inverse")
    pivot = precond.basis[j, j]
    if abs(pivot) < PIVOT_FLOOR:
        raise NumericalFailure(f"degenerate pivot B[{j},{j}] = {pivot!r}")
    return float(np.asarray(w, dtype=np.float64)[j] / pivot)


def derive_rngs(seed: int, names: Sequence[str]) -> dict[str, np.random.Generator]:
    """Independent counter-based generators, one per named stream."""
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(names, children)}
