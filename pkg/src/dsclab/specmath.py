"""Symmetric linear algebra and representation-geometry diagnostics.

Covariance split into between/within class scatter, a Jacobi eigensolver,
effective rank / participation ratio, variance concentration, the class
subspace projector and tail (orthogonal-complement) energies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

EIG_REL_TOL = 1e-12
EIG_MAX_SWEEPS = 100
CLAMP_REL = 1e-12


@dataclass(frozen=True)
class FeatureMatrix:
    """Rows of representation vectors with integer class labels in ``[0, n_classes)``."""

    data: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        labels = np.asarray(self.labels).astype(np.int64)
        if data.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("feature matrix has no rows")
        if labels.shape != (data.shape[0],):
            raise ValueError("labels must have one entry per row")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature matrix has non-finite entries")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    @classmethod
    def unlabeled(cls, data) -> "FeatureMatrix":
        data = np.asarray(data, dtype=np.float64)
        return cls(data, np.zeros(data.shape[0], dtype=np.int64), 1)


def _rows(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


@dataclass(frozen=True)
class CovarianceSplit:
    sigma_total: np.ndarray
    sigma_between: np.ndarray
    sigma_within: np.ndarray
    class_means: np.ndarray
    global_mean: np.ndarray
    class_priors: np.ndarray


def covariance_split(feats: FeatureMatrix) -> CovarianceSplit:
    """Empirical total = between + within decomposition with priors ``n_c / n``."""
    if feats.n < 2:
        raise ValueError("covariance split needs at least 2 rows")
    counts = np.bincount(feats.labels, minlength=feats.n_classes)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"class has no samples: {missing}")
    x = feats.data
    n = feats.n
    mu = x.mean(axis=0)
    priors = counts / n

    means = np.zeros((feats.n_classes, feats.d))
    np.add.at(means, feats.labels, x)
    means /= counts[:, None]

    centered = x - mu
    total = centered.T @ centered / n
    dev = means - mu
    between = (dev * priors[:, None]).T @ dev
    resid = x - means[feats.labels]
    within = resid.T @ resid / n
    # exact symmetry; the products above are symmetric only up to rounding
    sym = lambda m: (m + m.T) / 2.0  # noqa: E731
    return CovarianceSplit(sym(total), sym(between), sym(within), means, mu, priors)


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each eigenvector made positive, for reproducible output
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvector columns of a symmetric matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] > 4096:
        raise ValueError("sym_eig supports d <= 4096")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-9 * scale:
        raise ValueError("matrix is not symmetric")
    m = np.ascontiguousarray((m + m.T) / 2.0)
    if m.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    vals, vecs, _ = kernels.jacobi_eigh(m, EIG_REL_TOL, EIG_MAX_SWEEPS)
    order = np.argsort(-vals, kind="stable")
    return vals[order], _canonical_signs(vecs[:, order])


def spectrum_measures(eigenvalues) -> tuple[float, float]:
    """``(r_eff, pr)`` of a nonnegative spectrum after relative clamping."""
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    if lam.size == 0 or lam.max() <= 0.0:
        raise ValueError("degenerate covariance: zero trace")
    lam = np.where(lam < CLAMP_REL * lam.max(), 0.0, lam)
    total = lam.sum()
    pr = total * total / np.sum(lam * lam)
    p = lam[lam > 0] / total
    if np.all(p == p[0]):
        # flat spectrum: exp(log k) is not always exactly k in floating point
        return float(p.size), float(pr)
    r_eff = float(np.exp(-np.sum(p * np.log(p))))
    return r_eff, float(pr)


@dataclass(frozen=True)
class SpectralSummary:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    r_eff: float
    pr: float
    rho_k: dict[int, float] = field(default_factory=dict)
    rho_within: float = 0.0

    @property
    def d(self) -> int:
        return self.eigenvalues.shape[0]


def default_k_list(n_classes: int, d: int) -> list[int]:
    return sorted({k for k in (max(n_classes - 1, 1), 64, d) if 1 <= k <= d})


def spectral_summary(split: CovarianceSplit, k_list=None) -> SpectralSummary:
    sigma = split.sigma_total
    if not np.all(np.isfinite(sigma)):
        raise ValueError("covariance has non-finite entries")
    tr = float(np.trace(sigma))
    if tr <= 0.0:
        raise ValueError("degenerate covariance: zero trace")
    vals, vecs = sym_eig(sigma)
    vals = np.clip(vals, 0.0, None)
    vals = np.where(vals < CLAMP_REL * vals[0], 0.0, vals)
    r_eff, pr = spectrum_measures(vals)
    d = vals.shape[0]
    if k_list is None:
        k_list = default_k_list(split.class_means.shape[0], d)
    cum = np.cumsum(vals) / vals.sum()
    rho = {}
    for k in sorted(set(int(k) for k in k_list)):
        if k < 1:
            raise ValueError("k must be >= 1")
        rho[k] = float(cum[min(k, d) - 1])
    rho_within = float(np.trace(split.sigma_within) / tr)
    return SpectralSummary(vals, vecs, r_eff, pr, rho, min(max(rho_within, 0.0), 1.0))


@dataclass(frozen=True)
class Projector:
    """Orthogonal projector onto ``span(basis)``; ``basis`` is d x k with orthonormal columns."""

    basis: np.ndarray

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def d(self) -> int:
        return self.basis.shape[0]

    def matrix(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def complement_matrix(self) -> np.ndarray:
        return np.eye(self.d) - self.matrix()

    def project(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x @ self.basis) @ self.basis.T

    def residual(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x - self.project(x)


def class_subspace(split: CovarianceSplit, k: int) -> Projector:
    """Span of the top-``k`` eigenvectors of the total covariance."""
    d = split.sigma_total.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, {d}], got {k}")
    _, vecs = sym_eig(split.sigma_total)
    return Projector(np.ascontiguousarray(vecs[:, :k]))


def orthogonal_energy(feats, p: Projector) -> tuple[np.ndarray, float]:
    """Per-row ``||P_perp z||^2`` and their mean (the tail-energy plug-in)."""
    x = _rows(feats)
    if x.shape[1] != p.d:
        raise ValueError(f"dimension mismatch: features have d={x.shape[1]}, projector d={p.d}")
    r = p.residual(x)
    energy = np.einsum("ij,ij->i", r, r)
    return energy, float(energy.mean()) if energy.size else 0.0


@dataclass(frozen=True)
class NullspaceAudit:
    id_mean: float
    ood_mean: float
    separated: bool


def nullspace_audit(id_feats, ood_feats, p: Projector) -> NullspaceAudit:
    x_id, x_ood = _rows(id_feats), _rows(ood_feats)
    if x_id.shape[0] == 0 or x_ood.shape[0] == 0:
        raise ValueError("nullspace audit needs nonempty ID and OOD inputs")
    _, id_mean = orthogonal_energy(x_id, p)
    _, ood_mean = orthogonal_energy(x_ood, p)
    return NullspaceAudit(id_mean, ood_mean, ood_mean > id_mean)


def operator_norm(a, max_iter: int = 200, rel_tol: float = 1e-12, seed: int = 0) -> float:
    """Largest singular value via power iteration on ``a^T a``."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0 or not np.any(a):
        return 0.0
    gram = a.T @ a
    v = np.random.default_rng(seed).normal(size=gram.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = gram @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new = float(v @ gram @ v)
        if abs(new - est) <= rel_tol * max(abs(new), 1e-300):
            est = new
            break
        est = new
    return float(np.sqrt(max(est, 0.0)))
