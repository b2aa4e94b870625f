"""Instance generators: correlated-block covariances, Gaussian designs,
near-duplicate column designs, random supports, labels, and bundle I/O."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DesignMatrix, NoiseModel, Support, as_index_array
from .io import read_json, read_matrix, write_json, write_matrix

STREAMS = ("design", "support", "noise", "algorithm")


def stream_rngs(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for design, support, noise and algorithm randomness."""
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(c)) for name, c in zip(STREAMS, children)}


def stream_seeds(seed: int) -> dict[str, int]:
    """Integer seeds for each named stream (handy for reports and CLI calls)."""
    children = np.random.SeedSequence(int(seed)).spawn(len(STREAMS))
    return {name: int(c.generate_state(1, dtype=np.uint64)[0]) for name, c in zip(STREAMS, children)}


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed_or_rng))))


@dataclass(frozen=True)
class BlockSigmaSpec:
    n_blocks: int
    block_size: int
    epsilon: float

    def __post_init__(self):
        if self.n_blocks < 1 or self.block_size < 1:
            raise ValueError("n_blocks and block_size must be positive")
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must be in (0, 1], got {self.epsilon}")

    @property
    def d(self) -> int:
        return self.n_blocks * self.block_size

    def kappa(self, k: int) -> float:
        """Exact k-sparse condition number of the covariance."""
        if k >= 2 and self.block_size >= 2:
            return 1.0 / math.sqrt(self.epsilon)
        return 1.0

    def kappa_bounds(self) -> tuple[float, float]:
        """Witness lower bound and a safe upper bound for k >= 2."""
        return math.sqrt(1.0 / self.epsilon), math.sqrt(2.0 / self.epsilon)

    def block_of(self, i) -> np.ndarray:
        return np.asarray(i) // self.block_size

    def collision_probability(self, k: int) -> float:
        """Chance that a uniform size-k support puts two indices in one block."""
        d, b, t = self.d, self.block_size, self.n_blocks
        if k > t:
            return 1.0
        return 1.0 - math.comb(t, k) * b**k / math.comb(d, k)


def block_correlated_sigma(spec: BlockSigmaSpec) -> np.ndarray:
    """Block-diagonal covariance with blocks ``(1 - eps) J + eps I``."""
    b = spec.block_size
    block = (1.0 - spec.epsilon) * np.ones((b, b))
    block[np.diag_indices(b)] = 1.0
    return np.kron(np.eye(spec.n_blocks), block)


def _sqrt_psd(sigma: np.ndarray) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if lam.size and lam[0] < -1e-10 * max(1.0, abs(lam[-1])):
        raise ValueError(f"covariance is not PSD (min eigenvalue {lam[0]:.3e})")
    return (V * np.sqrt(np.clip(lam, 0.0, None))) @ V.T


def sample_gaussian_design(sigma, n: int, seed) -> DesignMatrix:
    """Rows i.i.d. ``N(0, sigma)``. ``sigma`` may be a matrix or a BlockSigmaSpec."""
    rng = _rng(seed)
    if isinstance(sigma, BlockSigmaSpec):
        return DesignMatrix(_latent_block_rows(sigma, n, rng))
    sigma = np.asarray(sigma, dtype=np.float64)
    root = _sqrt_psd(sigma)
    return DesignMatrix(rng.standard_normal((n, sigma.shape[0])) @ root)


def _latent_block_rows(spec: BlockSigmaSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    shared = rng.standard_normal((n, spec.n_blocks))
    own = rng.standard_normal((n, spec.d))
    return math.sqrt(1.0 - spec.epsilon) * np.repeat(shared, spec.block_size, axis=1) + math.sqrt(spec.epsilon) * own


def normalize_columns(data) -> np.ndarray:
    """Rescale every nonzero column to norm exactly ``sqrt(N)``."""
    data = np.asarray(data, dtype=np.float64)
    norms = np.linalg.norm(data, axis=0)
    scale = np.where(norms > 0, math.sqrt(data.shape[0]) / np.where(norms > 0, norms, 1.0), 1.0)
    return data * scale


def random_support(d: int, k: int, seed) -> Support:
    if not 0 <= k <= d:
        raise ValueError(f"need 0 <= k <= d, got k={k}, d={d}")
    rng = _rng(seed)
    return Support.of(rng.choice(d, size=k, replace=False).tolist(), d)


def scale_ground_truth(matrix, support, raw_w, mode: str = "fixed") -> np.ndarray:
    """Put ``raw_w`` (length k) on ``support`` and normalize.

    ``mode='fixed'``: ``||X w|| = sqrt(N)`` for the design ``matrix``.
    ``mode='gaussian'``: ``w^T Sigma w = 1`` for the covariance ``matrix``.
    ``mode='raw'``: no rescaling.
    """
    idx = as_index_array(support)
    if isinstance(matrix, DesignMatrix):
        d = matrix.n_cols
    elif isinstance(matrix, BlockSigmaSpec):
        d = matrix.d
    else:
        d = np.asarray(matrix).shape[1]
    w = np.zeros(d)
    w[idx] = np.asarray(raw_w, dtype=np.float64)
    if mode == "raw":
        return w
    if mode == "fixed":
        data = matrix.data if isinstance(matrix, DesignMatrix) else np.asarray(matrix)
        q = float(np.mean((data[:, idx] @ w[idx]) ** 2))
    elif mode == "gaussian":
        sig = block_correlated_sigma(matrix) if isinstance(matrix, BlockSigmaSpec) else np.asarray(matrix)
        q = float(w[idx] @ sig[np.ix_(idx, idx)] @ w[idx])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not q > 1e-300:
        raise ValueError("ground truth has zero quadratic norm; resample")
    return w / math.sqrt(q)


def sample_slr(sigma, w_star, noise: NoiseModel, n: int, seed, noise_seed=None):
    """Draw ``(X, y)`` with ``y = X w* + xi``; noise uses its own stream."""
    if noise_seed is None:
        rngs = stream_rngs(int(seed))
        design_rng, noise_rng = rngs["design"], rngs["noise"]
    else:
        design_rng, noise_rng = _rng(seed), _rng(noise_seed)
    X = sample_gaussian_design(sigma, n, design_rng)
    y = X.data @ np.asarray(w_star) + noise.sample(n, noise_rng)
    return X, y


def pathological_duplicates(d: int, n_pairs: int, perturbation: float, n_rows: int | None = None,
                            seed=0) -> tuple[DesignMatrix, float]:
    """Design whose first ``n_pairs`` column pairs nearly coincide.

    Returns the design and the analytic 2-sparse condition number
    ``sqrt(2) / perturbation`` (``inf`` when the pair is exact). Each partner
    column is ``c a + s g`` with ``a``, ``g`` orthonormal directions scaled to
    ``sqrt(N)``, so the pair difference has norm ``perturbation * sqrt(N)``.
    """
    if 2 * n_pairs > d:
        raise ValueError("2 * n_pairs must be at most d")
    if not 0 <= perturbation <= math.sqrt(2):
        raise ValueError("perturbation must lie in [0, sqrt(2)]")
    n = n_rows if n_rows is not None else max(4 * d, 64)
    if n < d + n_pairs:
        raise ValueError("need n_rows >= d + n_pairs for the orthogonal construction")
    rng = _rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, d + n_pairs)))
    Q *= math.sqrt(n)
    X = Q[:, :d].copy()
    c = 1.0 - perturbation**2 / 2.0
    s = math.sqrt(max(0.0, 1.0 - c * c))
    for p in range(n_pairs):
        X[:, 2 * p + 1] = c * X[:, 2 * p] + s * Q[:, d + p]
    if n_pairs == 0:
        kappa = 1.0
    elif perturbation == 0:
        kappa = math.inf
    else:
        kappa = math.sqrt(2.0) / perturbation
    return DesignMatrix(X), kappa


class SlrSampler:
    """Sample source for the Gaussian-design model with a fixed ``w*``."""

    def __init__(self, covariance, w_star, noise: NoiseModel, seed: int):
        self.spec = covariance if isinstance(covariance, BlockSigmaSpec) else None
        self.covariance = block_correlated_sigma(covariance) if self.spec else np.asarray(covariance, float)
        self._root = None if self.spec else _sqrt_psd(self.covariance)
        self.w_star = np.asarray(w_star, dtype=np.float64)
        self.noise = noise
        base = np.random.SeedSequence(int(seed)).spawn(4)
        self._rng = {name: np.random.Generator(np.random.Philox(c))
                     for name, c in zip(("phase1", "phase2", "noise", "holdout"), base)}

    @property
    def d(self) -> int:
        return self.covariance.shape[0]

    def _rows(self, n, rng):
        if self.spec is not None:
            return _latent_block_rows(self.spec, n, rng)
        return rng.standard_normal((n, self.d)) @ self._root

    def draw_covariates(self, n: int, stream: str = "phase1") -> np.ndarray:
        return self._rows(n, self._rng[stream])

    def draw(self, n: int):
        X = self._rows(n, self._rng["phase2"])
        return X, X @ self.w_star + self.noise.sample(n, self._rng["noise"])


@dataclass
class GeneratedInstance:
    """Fixed-design instance plus everything needed to reproduce it."""

    design: DesignMatrix
    support: Support
    w_star: np.ndarray
    labels: np.ndarray
    noise: NoiseModel
    family: str
    kappa: float | None
    params: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def support_hash(self) -> str:
        return hashlib.sha256(",".join(map(str, self.support.indices)).encode()).hexdigest()[:16]


def make_fixed_instance(family: str, d: int, n: int, k: int, noise: NoiseModel, seed: int,
                        n_blocks: int = 1, epsilon: float = 1e-4, n_pairs: int = 0,
                        perturbation: float = 1.0) -> GeneratedInstance:
    """Build a column-normalized fixed-design instance from a family name."""
    rngs = stream_rngs(seed)
    if family == "identity":
        if n < d:
            raise ValueError("identity family needs n >= d")
        X = np.zeros((n, d))
        X[np.arange(d), np.arange(d)] = math.sqrt(n)
        design, kappa = DesignMatrix(X), 1.0
        params = {}
    elif family == "block":
        if d % n_blocks:
            raise ValueError("d must be a multiple of n_blocks")
        spec = BlockSigmaSpec(n_blocks, d // n_blocks, epsilon)
        design = DesignMatrix(normalize_columns(_latent_block_rows(spec, n, rngs["design"])))
        kappa = spec.kappa(k)
        params = {"n_blocks": n_blocks, "epsilon": epsilon}
    elif family == "duplicates":
        design, kappa = pathological_duplicates(d, n_pairs, perturbation, n_rows=n, seed=rngs["design"])
        if k < 2:
            kappa = 1.0
        params = {"n_pairs": n_pairs, "perturbation": perturbation}
    else:
        raise ValueError(f"unknown family {family!r}")
    support = random_support(d, k, rngs["support"])
    raw = rngs["support"].standard_normal(k)
    w_star = scale_ground_truth(design, support, raw, "fixed")
    labels = design.data @ w_star + noise.sample(n, rngs["noise"])
    return GeneratedInstance(design, support, w_star, labels, noise, family, kappa,
                             params, stream_seeds(seed) | {"master": int(seed)})


def save_instance(inst: GeneratedInstance, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "design.slrm", inst.design.data)
    write_matrix(out / "labels.slrm", inst.labels[:, None])
    meta = {
        "family": inst.family,
        "n_rows": inst.design.n_rows,
        "n_cols": inst.design.n_cols,
        "k": inst.support.k,
        "support": list(inst.support.indices),
        "w_star": [float(v) for v in inst.w_star],
        "noise": {"kind": inst.noise.kind.value, "sigma": inst.noise.sigma},
        "kappa": inst.kappa if inst.kappa is not None and math.isfinite(inst.kappa) else None,
        "kappa_infinite": inst.kappa is not None and math.isinf(inst.kappa),
        "params": inst.params,
        "seeds": inst.seeds,
    }
    write_json(out / "meta.json", meta)


def load_instance(in_dir) -> GeneratedInstance:
    src = Path(in_dir)
    meta = read_json(src / "meta.json")
    design = DesignMatrix(read_matrix(src / "design.slrm"))
    labels = read_matrix(src / "labels.slrm")[:, 0]
    if design.n_rows != labels.size:
        raise ValueError("labels and design row counts differ")
    kappa = meta.get("kappa")
    if kappa is None and meta.get("kappa_infinite"):
        kappa = math.inf
    return GeneratedInstance(
        design=design,
        support=Support.of(meta["support"], design.n_cols),
        w_star=np.asarray(meta["w_star"], dtype=np.float64),
        labels=labels,
        noise=NoiseModel(meta["noise"]["kind"], meta["noise"]["sigma"]),
        family=meta["family"],
        kappa=kappa,
        params=meta.get("params", {}),
        seeds=meta.get("seeds", {}),
    )
