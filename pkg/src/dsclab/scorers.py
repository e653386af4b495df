"""Post-hoc OOD scoring rules with a fit-then-score contract.

Every fitted scorer exposes ``score(feats) -> ndarray`` where larger means more
in-distribution. Logit-based scorers carry the classifier head ``(W, b)`` so
they can be scored from features alone; ``TEACHER_MDS`` is scored on teacher
features instead of student features.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import ClassVar

import numpy as np
from scipy.special import logsumexp, softmax

from .specmath import FeatureMatrix, sym_eig

VARIANTS = ("MSP", "EBO", "MDS", "KNN", "VIM", "REACT", "SCALE", "NCI", "WHITEN", "TEACHER_MDS")
STUDENT_SCORERS = VARIANTS[:-1]

DEFAULT_SHRINK_REL = 1e-3


def _logits_checked(logits) -> np.ndarray:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits have non-finite entries")
    return logits


def _feats(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.data
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def head_logits(feats, w, b) -> np.ndarray:
    return _feats(feats) @ np.asarray(w).T + np.asarray(b)


def score_msp(logits) -> np.ndarray:
    logits = _logits_checked(logits)
    if logits.shape[1] < 2:
        raise ValueError("MSP needs at least 2 classes")
    return softmax(logits, axis=1).max(axis=1)


def score_energy(logits, temperature: float = 1.0) -> np.ndarray:
    """Negated free energy ``T * logsumexp(logits / T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = _logits_checked(logits)
    return temperature * logsumexp(logits / temperature, axis=1)


class FittedScorer:
    """Base for fitted scorers; subclasses are dataclasses of numpy arrays and scalars."""

    variant: ClassVar[str]

    def score(self, feats) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f.name: np.asarray(getattr(self, f.name), dtype=np.float64) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "FittedScorer":
        kwargs = {}
        for f in fields(cls):
            a = arrays[f.name]
            if f.type in ("int", "bool"):
                kwargs[f.name] = {"int": int, "bool": bool}[f.type](a)
            elif f.type == "float":
                kwargs[f.name] = float(a)
            else:
                kwargs[f.name] = np.array(a)
        return cls(**kwargs)


@dataclass
class MSPScorer(FittedScorer):
    variant: ClassVar[str] = "MSP"
    w: np.ndarray
    b: np.ndarray

    def score(self, feats) -> np.ndarray:
        return score_msp(head_logits(feats, self.w, self.b))


@dataclass
class EnergyScorer(FittedScorer):
    variant: ClassVar[str] = "EBO"
    w: np.ndarray
    b: np.ndarray
    temperature: float = 1.0

    def score(self, feats) -> np.ndarray:
        return score_energy(head_logits(feats, self.w, self.b), self.temperature)


def _whitener(cov: np.ndarray, shrink: float) -> np.ndarray:
    vals, vecs = sym_eig(cov)
    vals = np.clip(vals, 0.0, None) + shrink
    return (vecs / np.sqrt(vals)).T


def default_shrinkage(cov: np.ndarray) -> float:
    mean_eig = float(np.trace(cov)) / cov.shape[0]
    return max(DEFAULT_SHRINK_REL * mean_eig, 1e-12)


@dataclass
class MDSScorer(FittedScorer):
    """Class-conditional Mahalanobis; ``whiteners[c]`` maps ``z - mu_c`` to whitened coordinates.

    With a tied covariance all ``whiteners`` entries are identical.
    """

    variant: ClassVar[str] = "MDS"
    class_means: np.ndarray
    covariances: np.ndarray
    shrink: float
    whiteners: np.ndarray
    per_class: bool = False

    def distances(self, feats) -> np.ndarray:
        x = _feats(feats)
        out = np.empty((x.shape[0], self.class_means.shape[0]))
        for c, (mu, wh) in enumerate(zip(self.class_means, self.whiteners)):
            y = (x - mu) @ wh.T
            out[:, c] = np.einsum("ij,ij->i", y, y)
        return out

    def score(self, feats) -> np.ndarray:
        return -self.distances(feats).min(axis=1)


@dataclass
class TeacherMDSScorer(MDSScorer):
    variant: ClassVar[str] = "TEACHER_MDS"


def _class_means(train: FeatureMatrix) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(train.labels, minlength=train.n_classes)
    if np.any(counts == 0):
        raise ValueError(f"class has no samples: {np.flatnonzero(counts == 0).tolist()}")
    means = np.zeros((train.n_classes, train.d))
    np.add.at(means, train.labels, train.data)
    return means / counts[:, None], counts


def fit_mds(train: FeatureMatrix, lambda_shrink: float | None = None, per_class: bool = False,
            cls=MDSScorer) -> MDSScorer:
    means, counts = _class_means(train)
    if np.any(counts < 2):
        warnings.warn("class with fewer than 2 samples; its covariance contribution is zero", stacklevel=2)
    resid = train.data - means[train.labels]
    if per_class:
        covs = []
        for c in range(train.n_classes):
            r = resid[train.labels == c]
            covs.append(r.T @ r / r.shape[0])
        covs = np.array([(c + c.T) / 2 for c in covs])
    else:
        pooled = resid.T @ resid / train.n
        covs = np.repeat(((pooled + pooled.T) / 2)[None], train.n_classes, axis=0)
    if lambda_shrink is None:
        lambda_shrink = default_shrinkage(covs.mean(axis=0))
    if lambda_shrink <= 0:
        raise ValueError("lambda_shrink must be positive")
    if per_class:
        whiteners = np.array([_whitener(c, lambda_shrink) for c in covs])
    else:
        whiteners = np.repeat(_whitener(covs[0], lambda_shrink)[None], train.n_classes, axis=0)
    return cls(means, covs, float(lambda_shrink), whiteners, per_class)


def mds_from_statistics(class_means, covariance, lambda_shrink: float) -> MDSScorer:
    """Tied-covariance MDS built from given statistics rather than data."""
    class_means = np.atleast_2d(np.asarray(class_means, dtype=np.float64))
    cov = np.asarray(covariance, dtype=np.float64)
    c = class_means.shape[0]
    wh = _whitener(cov, lambda_shrink)
    return MDSScorer(class_means, np.repeat(cov[None], c, 0), float(lambda_shrink), np.repeat(wh[None], c, 0))


def fit_teacher_mds(teacher_train: FeatureMatrix, lambda_shrink: float | None = None,
                    per_class: bool = False) -> TeacherMDSScorer:
    return fit_mds(teacher_train, lambda_shrink, per_class, cls=TeacherMDSScorer)


@dataclass
class WhitenScorer(FittedScorer):
    variant: ClassVar[str] = "WHITEN"
    mean: np.ndarray
    covariance: np.ndarray
    shrink: float
    whitener: np.ndarray

    def score(self, feats) -> np.ndarray:
        y = (_feats(feats) - self.mean) @ self.whitener.T
        return -np.einsum("ij,ij->i", y, y)


def fit_whiten(train, lambda_shrink: float | None = None) -> WhitenScorer:
    x = _feats(train)
    if x.shape[0] < 2:
        raise ValueError("whitening needs at least 2 rows")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / x.shape[0]
    cov = (cov + cov.T) / 2
    if lambda_shrink is None:
        lambda_shrink = default_shrinkage(cov)
    if lambda_shrink <= 0:
        raise ValueError("lambda_shrink must be positive")
    return WhitenScorer(mu, cov, float(lambda_shrink), _whitener(cov, lambda_shrink))


def _l2_rows(x: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(nrm > 0, nrm, 1.0)


@dataclass
class KNNScorer(FittedScorer):
    variant: ClassVar[str] = "KNN"
    store: np.ndarray
    k: int
    normalize: bool = True

    def kth_distance(self, feats) -> np.ndarray:
        from . import kernels

        q = _feats(feats)
        if self.normalize:
            q = _l2_rows(q)
        return kernels.knn_kth_distance(self.store, np.ascontiguousarray(q), self.k)

    def score(self, feats) -> np.ndarray:
        return -self.kth_distance(feats)


def fit_knn(train, k: int = 10, normalize: bool = True) -> KNNScorer:
    x = _feats(train)
    if not 1 <= k <= x.shape[0]:
        raise ValueError(f"k={k} must be in [1, n_train={x.shape[0]}]")
    store = _l2_rows(x) if normalize else x.copy()
    return KNNScorer(np.ascontiguousarray(store), int(k), bool(normalize))


@dataclass
class VIMScorer(FittedScorer):
    variant: ClassVar[str] = "VIM"
    w: np.ndarray
    b: np.ndarray
    center: np.ndarray
    basis: np.ndarray
    alpha: float

    def residual_norm(self, feats) -> np.ndarray:
        xc = _feats(feats) - self.center
        r = xc - (xc @ self.basis) @ self.basis.T
        return np.linalg.norm(r, axis=1)

    def score(self, feats, logits=None) -> np.ndarray:
        if logits is None:
            logits = head_logits(feats, self.w, self.b)
        return logsumexp(_logits_checked(logits), axis=1) - self.alpha * self.residual_norm(feats)


def fit_vim(train, head, subspace_dim: int | None = None) -> VIMScorer:
    w, b = (np.asarray(a, dtype=np.float64) for a in head)
    x = _feats(train)
    d = x.shape[1]
    if subspace_dim is None:
        subspace_dim = max(w.shape[0] - 1, 1)
    if not 1 <= subspace_dim < d:
        raise ValueError(f"subspace_dim must be in [1, d) with d={d}")
    mu = x.mean(axis=0)
    xc = x - mu
    _, vecs = sym_eig((xc.T @ xc) / x.shape[0])
    basis = np.ascontiguousarray(vecs[:, :subspace_dim])
    proto = VIMScorer(w, b, mu, basis, 0.0)
    mean_resid = float(proto.residual_norm(x).mean())
    if mean_resid <= 1e-12:
        raise ValueError("features fully inside subspace; ViM undefined")
    max_logit = float(head_logits(x, w, b).max(axis=1).mean())
    proto.alpha = max_logit / mean_resid
    return proto


@dataclass
class ReActScorer(FittedScorer):
    variant: ClassVar[str] = "REACT"
    w: np.ndarray
    b: np.ndarray
    threshold: np.ndarray

    def score(self, feats) -> np.ndarray:
        clipped = np.minimum(_feats(feats), self.threshold)
        return score_energy(head_logits(clipped, self.w, self.b))


def fit_react(train, head, percentile: float = 90.0, per_dim: bool = False) -> ReActScorer:
    if not 0.0 < percentile < 100.0:
        raise ValueError("percentile must lie in (0, 100)")
    x = _feats(train)
    w, b = (np.asarray(a, dtype=np.float64) for a in head)
    c = np.percentile(x, percentile, axis=0) if per_dim else np.percentile(x, percentile)
    return ReActScorer(w, b, np.asarray(c, dtype=np.float64))


def scale_factors(feats, percentile: float = 85.0) -> np.ndarray:
    """Per-row ratio of total activation to the activation mass at or above the row percentile."""
    x = _feats(feats)
    if np.any(x < 0):
        raise ValueError("SCALE expects nonnegative (rectified) activations")
    cut = np.percentile(x, percentile, axis=1, keepdims=True)
    kept = np.where(x >= cut, x, 0.0).sum(axis=1)
    bad = np.flatnonzero(kept <= 0.0)
    if bad.size:
        raise ValueError(f"degenerate activation profile in rows {bad[:10].tolist()}")
    return x.sum(axis=1) / kept


@dataclass
class ScaleScorer(FittedScorer):
    variant: ClassVar[str] = "SCALE"
    w: np.ndarray
    b: np.ndarray
    percentile: float = 85.0

    def score(self, feats) -> np.ndarray:
        x = _feats(feats)
        s = scale_factors(x, self.percentile)
        return score_energy(head_logits(x * np.exp(s - 1.0)[:, None], self.w, self.b))


def score_scale(feats, head, percentile: float = 85.0) -> np.ndarray:
    if not 0.0 < percentile < 100.0:
        raise ValueError("percentile must lie in (0, 100)")
    w, b = head
    return ScaleScorer(np.asarray(w, float), np.asarray(b, float), percentile).score(feats)


@dataclass
class NCIScorer(FittedScorer):
    variant: ClassVar[str] = "NCI"
    w: np.ndarray
    b: np.ndarray
    center: np.ndarray
    mean_norm: float
    gamma: float = 0.1

    def score(self, feats, predicted=None) -> np.ndarray:
        x = _feats(feats)
        if predicted is None:
            predicted = head_logits(x, self.w, self.b).argmax(axis=1)
        wy = self.w[np.asarray(predicted)]
        xc = x - self.center
        num = np.einsum("ij,ij->i", xc, wy)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(wy, axis=1)
        cos = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return cos + self.gamma * np.linalg.norm(x, axis=1) / self.mean_norm


def fit_nci(train, head, gamma: float = 0.1) -> NCIScorer:
    w, b = (np.asarray(a, dtype=np.float64) for a in head)
    x = _feats(train)
    mean_norm = float(np.linalg.norm(x, axis=1).mean())
    if mean_norm <= 0:
        raise ValueError("training features all zero; NCI norm term undefined")
    return NCIScorer(w, b, x.mean(axis=0), mean_norm, float(gamma))


SCORER_CLASSES: dict[str, type[FittedScorer]] = {
    cls.variant: cls
    for cls in (MSPScorer, EnergyScorer, MDSScorer, KNNScorer, VIMScorer, ReActScorer,
                ScaleScorer, NCIScorer, WhitenScorer, TeacherMDSScorer)
}


@dataclass
class ScorerConfig:
    lambda_shrink: float | None = None
    mds_per_class: bool = False
    knn_k: int = 10
    knn_normalize: bool = True
    vim_dim: int | None = None
    react_percentile: float = 90.0
    react_per_dim: bool = False
    scale_percentile: float = 85.0
    nci_gamma: float = 0.1
    energy_temperature: float = 1.0


def fit_scorer(name: str, train: FeatureMatrix, head, teacher_train: FeatureMatrix | None = None,
               cfg: ScorerConfig | None = None) -> FittedScorer:
    """Fit one roster entry on ID training features (and teacher features for TEACHER_MDS)."""
    cfg = cfg or ScorerConfig()
    w, b = (np.asarray(a, dtype=np.float64) for a in head)
    if name == "MSP":
        return MSPScorer(w, b)
    if name == "EBO":
        return EnergyScorer(w, b, cfg.energy_temperature)
    if name == "MDS":
        return fit_mds(train, cfg.lambda_shrink, cfg.mds_per_class)
    if name == "KNN":
        return fit_knn(train, cfg.knn_k, cfg.knn_normalize)
    if name == "VIM":
        return fit_vim(train, (w, b), cfg.vim_dim)
    if name == "REACT":
        return fit_react(train, (w, b), cfg.react_percentile, cfg.react_per_dim)
    if name == "SCALE":
        return ScaleScorer(w, b, cfg.scale_percentile)
    if name == "NCI":
        return fit_nci(train, (w, b), cfg.nci_gamma)
    if name == "WHITEN":
        return fit_whiten(train, cfg.lambda_shrink)
    if name == "TEACHER_MDS":
        if teacher_train is None:
            raise ValueError("TEACHER_MDS needs teacher training features")
        return fit_teacher_mds(teacher_train, cfg.lambda_shrink, cfg.mds_per_class)
    raise ValueError(f"unknown scorer {name!r}; expected one of {VARIANTS}")


def score_mds(fitted: MDSScorer, feats) -> np.ndarray:
    return fitted.score(feats)


def score_teacher_mds(fitted: TeacherMDSScorer, teacher_feats) -> np.ndarray:
    return fitted.score(teacher_feats)


def score_whiten(fitted: WhitenScorer, feats) -> np.ndarray:
    return fitted.score(feats)


def score_knn(fitted: KNNScorer, feats) -> np.ndarray:
    return fitted.score(feats)


def score_vim(fitted: VIMScorer, feats, logits=None) -> np.ndarray:
    return fitted.score(feats, logits)


def score_react(fitted: ReActScorer, feats) -> np.ndarray:
    return fitted.score(feats)


def score_nci(fitted: NCIScorer, feats, predicted_class=None) -> np.ndarray:
    return fitted.score(feats, predicted_class)
