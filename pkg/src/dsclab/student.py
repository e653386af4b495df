"""Rectifier MLP student with a classifier head and an auxiliary domain head.

Trunk: ``x -> relu(...) x L -> relu(feature layer) = z``; classifier ``logits = z W^T + b``;
domain head ``h(z) = relu(z H1^T + c1) H2^T + c2``. Gradients are written out by hand.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .residual import (
    TeacherStats,
    batch_prototype_update,
    class_suppressed_residual,
    cosine_domain_loss_batch,
    empty_teacher_stats,
    teacher_stats,
)
from .specmath import FeatureMatrix, covariance_split, spectral_summary

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Training produced non-finite values or diverged."""


@dataclass
class MLPStudent:
    params: dict[str, np.ndarray]
    d_in: int
    hidden: tuple[int, ...]
    d_feat: int
    n_classes: int
    domain_hidden: int
    m: int

    @property
    def n_trunk(self) -> int:
        return len(self.hidden) + 1

    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.params["head.w"], self.params["head.b"]

    def copy(self) -> "MLPStudent":
        return copy.deepcopy(self)

    def to_arrays(self) -> dict[str, np.ndarray]:
        arch = np.array([self.d_in, self.d_feat, self.n_classes, self.domain_hidden, self.m, *self.hidden],
                        dtype=np.float64)
        return {"arch": arch, **self.params}

    @classmethod
    def from_arrays(cls, arrays) -> "MLPStudent":
        arch = [int(v) for v in arrays["arch"]]
        d_in, d_feat, c, dh, m, *hidden = arch
        params = {k: np.array(v) for k, v in arrays.items() if k != "arch"}
        return cls(params, d_in, tuple(hidden), d_feat, c, dh, m)


def param_names(student: MLPStudent) -> list[str]:
    return list(student.params)


def init_student(d_in: int, n_classes: int, m: int, hidden=(64, 64), d_feat: int = 32,
                 domain_hidden: int | None = None, rng: np.random.Generator | None = None) -> MLPStudent:
    """Fan-in scaled uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    domain_hidden = d_feat if domain_hidden is None else domain_hidden
    params: dict[str, np.ndarray] = {}

    def layer(name, fan_out, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params[f"{name}.b"] = np.zeros(fan_out)

    dims = [d_in, *hidden, d_feat]
    for i in range(len(dims) - 1):
        layer(f"trunk{i}", dims[i + 1], dims[i])
    layer("head", n_classes, d_feat)
    layer("dom1", domain_hidden, d_feat)
    layer("dom2", m, domain_hidden)
    return MLPStudent(params, d_in, tuple(hidden), d_feat, n_classes, domain_hidden, m)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each trunk layer
    pre: list[np.ndarray]  # trunk pre-activations
    z: np.ndarray
    logits: np.ndarray
    dom_pre: np.ndarray | None = None
    dom_hidden: np.ndarray | None = None
    domain_pred: np.ndarray | None = None


def forward(student: MLPStudent, x, with_domain: bool = True) -> ForwardCache:
    """Batch forward pass; ``x`` is B x d_in (a single vector is promoted to a batch)."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.shape[1] != student.d_in:
        raise ValueError(f"input dimension {a.shape[1]} != {student.d_in}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite input")
    p = student.params
    inputs, pres = [], []
    for i in range(student.n_trunk):
        inputs.append(a)
        pre = a @ p[f"trunk{i}.w"].T + p[f"trunk{i}.b"]
        pres.append(pre)
        a = np.maximum(pre, 0.0)
    z = a
    logits = z @ p["head.w"].T + p["head.b"]
    cache = ForwardCache(inputs, pres, z, logits)
    if with_domain:
        cache.dom_pre = z @ p["dom1.w"].T + p["dom1.b"]
        cache.dom_hidden = np.maximum(cache.dom_pre, 0.0)
        cache.domain_pred = cache.dom_hidden @ p["dom2.w"].T + p["dom2.b"]
    return cache


def features(student: MLPStudent, x) -> np.ndarray:
    return forward(student, x, with_domain=False).z


def logits_of(student: MLPStudent, x) -> np.ndarray:
    return forward(student, x, with_domain=False).logits


def ce_loss_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and d loss_i / d logits_i (softmax - onehot)."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    loss = np.maximum(lse - shifted[rows, labels], 0.0)
    grad = np.exp(shifted - lse[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad


def ce_loss(logits, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError("label out of range")
    loss, grad = ce_loss_batch(logits[None, :], np.array([label]))
    return float(loss[0]), grad[0]


def backward(student: MLPStudent, cache: ForwardCache, d_logits: np.ndarray,
             d_domain: np.ndarray | None = None, detach_domain: bool = False) -> dict[str, np.ndarray]:
    p = student.params
    grads: dict[str, np.ndarray] = {}
    grads["head.w"] = d_logits.T @ cache.z
    grads["head.b"] = d_logits.sum(axis=0)
    dz = d_logits @ p["head.w"]
    if d_domain is not None:
        grads["dom2.w"] = d_domain.T @ cache.dom_hidden
        grads["dom2.b"] = d_domain.sum(axis=0)
        d_dpre = (d_domain @ p["dom2.w"]) * (cache.dom_pre > 0)
        grads["dom1.w"] = d_dpre.T @ cache.z
        grads["dom1.b"] = d_dpre.sum(axis=0)
        if not detach_domain:
            dz = dz + d_dpre @ p["dom1.w"]
    da = dz
    for i in reversed(range(student.n_trunk)):
        dpre = da * (cache.pre[i] > 0)
        grads[f"trunk{i}.w"] = dpre.T @ cache.inputs[i]
        grads[f"trunk{i}.b"] = dpre.sum(axis=0)
        if i:
            da = dpre @ p[f"trunk{i}.w"]
    return grads


@dataclass
class LossBreakdown:
    total: float
    ce: float
    domain: float
    accuracy: float


def loss_and_grads(student: MLPStudent, x, y, targets, lambda_tgt: float,
                   detach_domain: bool = False) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Mean CE + lambda * mean cosine domain loss, with exact gradients.

    ``targets`` are class-suppressed teacher residuals (B x m); ignored when ``lambda_tgt == 0``.
    """
    y = np.asarray(y)
    use_domain = lambda_tgt != 0.0
    cache = forward(student, x, with_domain=use_domain)
    bsz = cache.z.shape[0]
    ce, d_logits = ce_loss_batch(cache.logits, y)
    d_logits /= bsz
    dom_mean = 0.0
    d_dom = None
    if use_domain:
        dom, g = cosine_domain_loss_batch(cache.domain_pred, np.asarray(targets, dtype=np.float64))
        dom_mean = float(dom.mean())
        d_dom = g * (lambda_tgt / bsz)
    grads = backward(student, cache, d_logits, d_dom, detach_domain)
    ce_mean = float(ce.mean())
    acc = float(np.mean(cache.logits.argmax(axis=1) == y))
    return LossBreakdown(ce_mean + lambda_tgt * dom_mean, ce_mean, dom_mean, acc), grads


def total_loss(student: MLPStudent, x, y, targets, lambda_tgt: float) -> float:
    cache = forward(student, x, with_domain=True)
    ce, _ = ce_loss_batch(cache.logits, np.asarray(y))
    dom, _ = cosine_domain_loss_batch(cache.domain_pred, np.asarray(targets, dtype=np.float64))
    return float(ce.mean() + lambda_tgt * dom.mean())


@dataclass
class TrainConfig:
    lambda_tgt: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.02
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    prototype_mode: str = "precomputed"
    ema_momentum: float = 0.9
    projector_eps: float = 1e-4
    record_geometry_every: int = 0
    detach_domain_head: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if self.lambda_tgt < 0:
            raise ValueError("lambda_tgt must be nonnegative")
        if self.prototype_mode not in ("precomputed", "ema"):
            raise ValueError("prototype_mode must be 'precomputed' or 'ema'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class SGDMomentum:
    """Heavy-ball SGD with decoupled weight decay: ``p -= lr * (v + wd * p)``, ``v = mu v + g``."""

    lr: float
    momentum: float
    weight_decay: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p = params[name]
            params[name] = p - self.lr * v - self.lr * self.weight_decay * p


def tgt_step(student: MLPStudent, x, y, teacher_batch, stats: TeacherStats | None, cfg: TrainConfig,
             opt: SGDMomentum | None = None) -> tuple[MLPStudent, LossBreakdown]:
    """One optimisation step on a batch; mutates and returns ``student``.

    ``teacher_batch`` holds raw teacher features for the batch rows; the
    residual targets are formed from ``stats``.
    """
    if np.asarray(x).shape[0] == 0:
        raise ValueError("empty batch")
    opt = opt if opt is not None else SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)
    targets = None
    if cfg.lambda_tgt != 0.0:
        targets = class_suppressed_residual(stats, teacher_batch)
    breakdown, grads = loss_and_grads(student, x, y, targets, cfg.lambda_tgt, cfg.detach_domain_head)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in {name}")
    opt.step(student.params, grads)
    return student, breakdown


@dataclass
class GeometryRecord:
    epoch: int
    r_eff: float
    pr: float
    rho_k: float
    rho_within: float
    fpr95_mds_far: float


@dataclass
class GeometryTrace:
    records: list[GeometryRecord] = field(default_factory=list)

    HEADER = ("epoch", "r_eff", "pr", "rho_k", "rho_within", "fpr95_mds_far")

    def rows(self) -> list[list]:
        return [[r.epoch, r.r_eff, r.pr, r.rho_k, r.rho_within, r.fpr95_mds_far] for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Probe:
    """Frozen held-out inputs for geometry audits during training."""

    x_id: np.ndarray
    y_id: np.ndarray
    x_ood: np.ndarray | None = None


def geometry_record(student: MLPStudent, epoch: int, x_train, y_train, probe: Probe) -> GeometryRecord:
    from .metrics import fpr_at_tpr
    from .scorers import fit_mds

    c = student.n_classes
    feats = FeatureMatrix(features(student, probe.x_id), probe.y_id, c)
    summ = spectral_summary(covariance_split(feats), [max(c - 1, 1)])
    fpr = float("nan")
    if probe.x_ood is not None:
        mds = fit_mds(FeatureMatrix(features(student, x_train), y_train, c))
        fpr = fpr_at_tpr(mds.score(feats.data), mds.score(features(student, probe.x_ood)))
    return GeometryRecord(epoch, summ.r_eff, summ.pr, summ.rho_k[max(c - 1, 1)], summ.rho_within, fpr)


def train(student_init: MLPStudent, x, y, teacher_feats: np.ndarray | None, cfg: TrainConfig,
          probe: Probe | None = None, rng: np.random.Generator | None = None) -> tuple[MLPStudent, GeometryTrace]:
    """Seeded epoch loop; returns a trained copy (``student_init`` is untouched) and a geometry trace."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    student = student_init.copy()
    trace = GeometryTrace()
    if cfg.epochs == 0:
        return student, trace
    c = student.n_classes
    if np.any(np.bincount(y, minlength=c)[:c] == 0):
        raise ValueError("training set is missing classes")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = SGDMomentum(cfg.lr, cfg.momentum, cfg.weight_decay)

    stats = None
    if cfg.lambda_tgt != 0.0:
        if teacher_feats is None:
            raise ValueError("teacher features required when lambda_tgt > 0")
        teacher_feats = np.asarray(teacher_feats, dtype=np.float64)
        if cfg.prototype_mode == "precomputed":
            stats = teacher_stats(FeatureMatrix(teacher_feats, y, c), cfg.projector_eps)
        else:
            stats = empty_teacher_stats(c, teacher_feats.shape[1], cfg.projector_eps)

    n = x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            tb = None
            if stats is not None:
                tb = teacher_feats[idx]
                if cfg.prototype_mode == "ema":
                    stats = batch_prototype_update(stats, FeatureMatrix(tb, y[idx], c), cfg.ema_momentum)
            _, br = tgt_step(student, x[idx], y[idx], tb, stats, cfg, opt)
            if not np.isfinite(br.total) or br.total > 1e6:
                raise NumericalAbort(f"training diverged at epoch {epoch}: loss={br.total}")
        every = cfg.record_geometry_every
        if probe is not None and every > 0 and (epoch % every == 0 or epoch == cfg.epochs):
            trace.records.append(geometry_record(student, epoch, x, y, probe))
    return student, trace
