"""Class-suppressed teacher residuals and the cosine domain-alignment loss.

The teacher's class subspace is spanned by the centred class prototypes
``U = [mu_1 - mu, ..., mu_C - mu]``; the regularised projector
``U (U^T U + eps I)^{-1} U^T`` is never formed as an m x m system, only through
the C x C Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .specmath import FeatureMatrix, sym_eig

DEFAULT_PROJECTOR_EPS = 1e-4


@dataclass(frozen=True)
class TeacherStats:
    class_prototypes: np.ndarray  # C x m
    global_mean: np.ndarray  # m
    counts: np.ndarray  # C, cumulative sample counts
    projector_eps: float = DEFAULT_PROJECTOR_EPS

    @property
    def n_classes(self) -> int:
        return self.class_prototypes.shape[0]

    @property
    def m(self) -> int:
        return self.class_prototypes.shape[1]

    @property
    def u_basis(self) -> np.ndarray:
        """m x C' matrix of centred prototypes over classes seen so far."""
        seen = self.counts > 0
        return (self.class_prototypes[seen] - self.global_mean).T

    def gram_inverse(self) -> np.ndarray:
        u = self.u_basis
        vals, vecs = sym_eig(u.T @ u)
        return (vecs / (np.clip(vals, 0.0, None) + self.projector_eps)) @ vecs.T

    def p_cls(self) -> np.ndarray:
        u = self.u_basis
        return u @ self.gram_inverse() @ u.T

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "class_prototypes": self.class_prototypes,
            "global_mean": self.global_mean,
            "counts": self.counts.astype(np.float64),
            "projector_eps": np.float64(self.projector_eps),
        }

    @classmethod
    def from_arrays(cls, arrays) -> "TeacherStats":
        return cls(
            np.array(arrays["class_prototypes"]),
            np.array(arrays["global_mean"]),
            np.array(arrays["counts"]).astype(np.int64),
            float(arrays["projector_eps"]),
        )


def teacher_stats(teacher_feats: FeatureMatrix, projector_eps: float = DEFAULT_PROJECTOR_EPS) -> TeacherStats:
    if projector_eps <= 0:
        raise ValueError("projector_eps must be positive")
    counts = np.bincount(teacher_feats.labels, minlength=teacher_feats.n_classes)
    if np.any(counts == 0):
        raise ValueError(f"missing class in teacher features: {np.flatnonzero(counts == 0).tolist()}")
    protos = np.zeros((teacher_feats.n_classes, teacher_feats.d))
    np.add.at(protos, teacher_feats.labels, teacher_feats.data)
    protos /= counts[:, None]
    return TeacherStats(protos, teacher_feats.data.mean(axis=0), counts.astype(np.int64), float(projector_eps))


def class_suppressed_residual(stats: TeacherStats, u) -> np.ndarray:
    """``(I - P_cls)(u - mu)`` for a single vector or a batch of rows."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != stats.m:
        raise ValueError(f"teacher dimension mismatch: got {u.shape[-1]}, expected {stats.m}")
    centred = u - stats.global_mean
    basis = stats.u_basis
    if basis.shape[1] == 0:
        return centred
    coef = (centred @ basis) @ stats.gram_inverse()
    return centred - coef @ basis.T


def cosine_domain_loss(h_out, target) -> tuple[float, np.ndarray]:
    """``1 - cos(h_out, target)`` and its gradient w.r.t. ``h_out`` (target held constant)."""
    loss, grad = cosine_domain_loss_batch(np.atleast_2d(h_out), np.atleast_2d(target))
    return float(loss[0]), grad[0]


def cosine_domain_loss_batch(h_out: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine loss; zero-norm rows give loss 1 and zero gradient."""
    hn = np.linalg.norm(h_out, axis=1)
    tn = np.linalg.norm(target, axis=1)
    ok = (hn > 0) & (tn > 0)
    safe_h = np.where(ok, hn, 1.0)[:, None]
    safe_t = np.where(ok, tn, 1.0)[:, None]
    h_hat = h_out / safe_h
    t_hat = target / safe_t
    cos = np.where(ok, np.einsum("ij,ij->i", h_hat, t_hat), 0.0)
    loss = 1.0 - cos
    tangent = t_hat - cos[:, None] * h_hat
    # second projection removes the radial round-off left when h is nearly parallel to the target
    tangent -= np.einsum("ij,ij->i", tangent, h_hat)[:, None] * h_hat
    # a tangent below rounding level of unit vectors is an exact stationary point (cos = +-1)
    tangent[np.linalg.norm(tangent, axis=1) < 8 * np.finfo(np.float64).eps] = 0.0
    grad = -tangent / safe_h
    grad[~ok] = 0.0
    return loss, grad


def batch_prototype_update(stats: TeacherStats, batch: FeatureMatrix, momentum: float = 0.9) -> TeacherStats:
    """EMA update of the prototypes of classes present in ``batch``.

    A class seen for the first time takes its batch mean directly. The global
    mean is the count-weighted average of the current prototypes.
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if batch.d != stats.m:
        raise ValueError("teacher dimension mismatch")
    protos = stats.class_prototypes.copy()
    counts = stats.counts.copy()
    present = np.bincount(batch.labels, minlength=stats.n_classes)
    sums = np.zeros_like(protos)
    np.add.at(sums, batch.labels, batch.data)
    for c in np.flatnonzero(present):
        mean_c = sums[c] / present[c]
        protos[c] = mean_c if counts[c] == 0 else momentum * protos[c] + (1.0 - momentum) * mean_c
        counts[c] += present[c]
    weights = counts / counts.sum()
    mu = weights @ protos
    return replace(stats, class_prototypes=protos, global_mean=mu, counts=counts)


def empty_teacher_stats(n_classes: int, m: int, projector_eps: float = DEFAULT_PROJECTOR_EPS) -> TeacherStats:
    return TeacherStats(np.zeros((n_classes, m)), np.zeros(m), np.zeros(n_classes, dtype=np.int64), projector_eps)
