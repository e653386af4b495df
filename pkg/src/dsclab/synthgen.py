"""Synthetic single-domain data with a ``x = (x_d, x_y)`` split, a frozen synthetic
teacher, and the linear logistic toy.

Inputs are laid out as ``[x_d | x_y]``. Class anchors form a regular simplex in
``x_y``; during training ``x_d`` is the fixed domain value plus small jitter and
carries no label information. Out-of-domain samples keep the training-class
``x_y`` law and displace ``x_d`` along a per-sample random unit direction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize

from .specmath import FeatureMatrix

SPLITS = ("train", "id_test", "indomain_ood", "outdomain_ood")


@dataclass(frozen=True)
class GeneratorSpec:
    d_y: int = 16
    d_d: int = 16
    c_total: int = 9
    c_train: int = 6
    within_class_spread: float = 0.1
    anchor_scale: float = 2.0
    domain_value: float = 0.0
    domain_jitter: float = 0.1
    ood_domain_shift: float = 3.0
    n: int = 2000
    seed: int = 0
    teacher_dim: int = 32
    teacher_hidden: int = 128
    teacher_class_gain: float = 0.0

    def __post_init__(self):
        if not 1 <= self.c_train < self.c_total:
            raise ValueError("need 1 <= c_train < c_total")
        if self.c_total > self.d_y:
            raise ValueError("c_total anchors need d_y >= c_total")
        if self.within_class_spread < 0 or self.domain_jitter < 0:
            raise ValueError("spreads must be nonnegative")
        if self.ood_domain_shift < 0:
            raise ValueError("ood_domain_shift must be nonnegative")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def d_in(self) -> int:
        return self.d_d + self.d_y

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Split:
    x: np.ndarray
    labels: np.ndarray
    n_classes: int

    def as_features(self) -> FeatureMatrix:
        return FeatureMatrix(self.x, self.labels, self.n_classes)


@dataclass(frozen=True)
class SyntheticData:
    spec: GeneratorSpec
    anchors: np.ndarray  # c_total x d_y
    train: Split
    id_test: Split
    indomain_ood: Split
    outdomain_ood: Split

    def split(self, name: str) -> Split:
        return getattr(self, name)


def simplex_anchors(c: int, dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """``c`` points with equal pairwise distance ``scale * sqrt(2)``, centred at the origin."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, c)))
    pts = q.T
    return scale * (pts - pts.mean(axis=0))


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    g = rng.normal(size=(n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _draw(spec: GeneratorSpec, anchors, labels, rng, shift: float) -> np.ndarray:
    n = labels.shape[0]
    x_y = anchors[labels] + spec.within_class_spread * rng.normal(size=(n, spec.d_y))
    x_d = spec.domain_value + spec.domain_jitter * rng.normal(size=(n, spec.d_d))
    if shift:
        x_d = x_d + shift * _unit_rows(rng, n, spec.d_d)
    return np.hstack([x_d, x_y])


def _balanced_labels(n: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    labels = lo + np.arange(n) % (hi - lo)
    return rng.permutation(labels)


def gen_single_domain(spec: GeneratorSpec, rng: np.random.Generator | None = None) -> SyntheticData:
    """Train / ID-test / in-domain OOD (withheld classes) / out-of-domain OOD splits.

    Each split is drawn from its own child stream, so rows are distinct draws and
    changing one split's size leaves the others untouched.
    """
    root = np.random.SeedSequence(spec.seed) if rng is None else np.random.SeedSequence(rng.integers(2**63))
    s_anchor, s_train, s_test, s_in, s_out = (np.random.default_rng(s) for s in root.spawn(5))
    anchors = simplex_anchors(spec.c_total, spec.d_y, spec.anchor_scale, s_anchor)

    def make(stream, lo, hi, shift, c):
        labels = _balanced_labels(spec.n, lo, hi, stream)
        return Split(_draw(spec, anchors, labels, stream, shift), labels, c)

    return SyntheticData(
        spec,
        anchors,
        train=make(s_train, 0, spec.c_train, 0.0, spec.c_train),
        id_test=make(s_test, 0, spec.c_train, 0.0, spec.c_train),
        indomain_ood=make(s_in, spec.c_train, spec.c_total, 0.0, spec.c_total),
        outdomain_ood=make(s_out, 0, spec.c_train, spec.ood_domain_shift, spec.c_train),
    )


def label_information_proxy(x_block: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-coordinate correlation ratio (between-class / total variance) of ``x_block`` with the labels."""
    x = np.asarray(x_block, dtype=np.float64)
    total = x.var(axis=0)
    classes = np.unique(labels)
    mu = x.mean(axis=0)
    between = np.zeros(x.shape[1])
    for c in classes:
        sel = labels == c
        between += sel.mean() * (x[sel].mean(axis=0) - mu) ** 2
    return np.divide(between, total, out=np.zeros_like(total), where=total > 0)


@dataclass(frozen=True)
class SyntheticTeacher:
    """Frozen random two-layer rectifier map standing in for a multi-domain teacher.

    ``view`` is applied to ``x_y`` before the map: the class-anchor span is scaled
    by ``class_gain`` while the orthogonal (style) part passes unchanged.
    """

    view: np.ndarray  # d_y x d_y
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    d_d: int

    @property
    def m(self) -> int:
        return self.w2.shape[0]


def make_teacher(spec: GeneratorSpec, anchors: np.ndarray, rng: np.random.Generator) -> SyntheticTeacher:
    q, _ = np.linalg.qr(anchors.T)
    # anchors are centred, so they span c_total - 1 dimensions
    q = q[:, : spec.c_total - 1]
    p_anchor = q @ q.T
    view = (np.eye(spec.d_y) - p_anchor) + spec.teacher_class_gain * p_anchor
    d_in = spec.d_in
    w1 = rng.normal(size=(spec.teacher_hidden, d_in)) / np.sqrt(d_in)
    b1 = rng.uniform(-0.5, 0.5, size=spec.teacher_hidden)
    w2 = rng.normal(size=(spec.teacher_dim, spec.teacher_hidden)) * np.sqrt(2.0 / spec.teacher_hidden)
    b2 = np.zeros(spec.teacher_dim)
    return SyntheticTeacher(view, w1, b1, w2, b2, spec.d_d)


def teacher_embed(teacher: SyntheticTeacher, inputs) -> np.ndarray:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    xv = np.hstack([x[:, : teacher.d_d], x[:, teacher.d_d :] @ teacher.view.T])
    hidden = np.maximum(xv @ teacher.w1.T + teacher.b1, 0.0)
    return hidden @ teacher.w2.T + teacher.b2


# linear toy --------------------------------------------------------------------------


def linear_toy(n: int = 2000, p: int = 20, a_direction=None, noise: float = 0.5,
               rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``y in {-1, +1}``, ``x = y a + s`` with ``s`` orthogonal to ``a``; returns ``(x, y, a)``."""
    if p < 2:
        raise ValueError("p must be >= 2")
    rng = rng if rng is not None else np.random.default_rng(0)
    a = np.zeros(p) if a_direction is None else np.asarray(a_direction, dtype=np.float64)
    if a_direction is None:
        a[0] = 1.0
    y = rng.choice([-1.0, 1.0], size=n)
    g = noise * rng.normal(size=(n, p))
    a_hat = a / np.linalg.norm(a)
    s = g - np.outer(g @ a_hat, a_hat)
    return y[:, None] * a + s, y, a


@dataclass(frozen=True)
class LinearToyFit:
    a_map: np.ndarray  # r x p representation map
    w: np.ndarray  # r read-out

    @property
    def effective_weight(self) -> np.ndarray:
        return self.a_map.T @ self.w


def fit_linear_toy(x, y, rank: int | None = None, reg: float = 1e-2,
                   rng: np.random.Generator | None = None) -> LinearToyFit:
    """Minimise mean logistic loss of ``y w^T A x`` plus ``reg/2 (|w|^2 + |A|_F^2)`` with L-BFGS."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    r = p if rank is None else rank
    rng = rng if rng is not None else np.random.default_rng(0)
    theta0 = 0.1 * rng.normal(size=r * p + r)

    def unpack(theta):
        return theta[: r * p].reshape(r, p), theta[r * p :]

    def objective(theta):
        a_map, w = unpack(theta)
        z = x @ a_map.T
        margin = y * (z @ w)
        loss = np.logaddexp(0.0, -margin).mean() + 0.5 * reg * (w @ w + np.sum(a_map * a_map))
        coef = -y * np.exp(-np.logaddexp(0.0, margin)) / n  # d loss / d (w^T A x)
        g_w = z.T @ coef + reg * w
        g_a = np.outer(w, coef @ x) + reg * a_map
        return loss, np.concatenate([g_a.ravel(), g_w])

    res = minimize(objective, theta0, jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-10})
    a_map, w = unpack(res.x)
    return LinearToyFit(a_map, w)


def orthogonal_fraction(v, a) -> float:
    a_hat = np.asarray(a, dtype=np.float64) / np.linalg.norm(a)
    v = np.asarray(v, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        return 0.0
    return float(np.linalg.norm(v - (v @ a_hat) * a_hat) / nv)


def shift_attenuation(fit: LinearToyFit, a, delta) -> float:
    """Representation response to ``delta`` relative to the response to ``a``, per unit norm."""
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    resp_delta = np.linalg.norm(fit.a_map @ delta) / np.linalg.norm(delta)
    resp_a = np.linalg.norm(fit.a_map @ a) / np.linalg.norm(a)
    return float(resp_delta / resp_a)
