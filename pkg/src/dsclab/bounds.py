"""Plug-in checks of the distance-failure (kNN) and logit-insensitivity (Energy/MSP) bounds.

Every constant is estimated from data: tail energies from the class-subspace
projector, the in-subspace discrepancy by Monte-Carlo over ID/OOD pairs, head
norms by power iteration. The left-hand side is the empirical W1 between score
samples, with the larger sample subsampled to the smaller size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .metrics import wasserstein1
from .scorers import KNNScorer, head_logits, score_energy, score_msp
from .specmath import Projector, _rows, operator_norm, orthogonal_energy

DEFAULT_PAIRS = 10_000
SCORE_LIPSCHITZ = {"energy": 1.0, "msp": 2.0}
KNN_LIPSCHITZ = 1.0


@dataclass(frozen=True)
class BoundReport:
    kind: str
    tau_sq_id: float
    tau_sq_ood: float
    eps_hat: float
    eta_hat: float
    w_op: float
    l_k: float
    l_s: float
    lhs_w1: float
    rhs: float
    score_range: float
    holds: bool
    regime: str

    HEADER = ("kind", "tau_sq_id", "tau_sq_ood", "eps_hat", "eta_hat", "w_op", "l_k", "l_s",
              "lhs_w1", "rhs", "score_range", "holds", "regime")

    def row(self) -> list:
        d = asdict(self)
        return [int(d[k]) if k == "holds" else d[k] for k in self.HEADER]


def estimate_tau_sq(feats, projector: Projector) -> float:
    return orthogonal_energy(feats, projector)[1]


def estimate_eps(id_feats, ood_feats, projector: Projector, n_pairs: int = DEFAULT_PAIRS,
                 rng: np.random.Generator | None = None, paired: bool = False) -> float:
    """Mean in-subspace distance ``||P z_id - P z_ood||`` over sampled pairs.

    Unpaired (default): independent uniform draws from each set. Paired: the same
    row index in both sets, which requires equal sizes.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    a, b = _rows(id_feats), _rows(ood_feats)
    rng = rng if rng is not None else np.random.default_rng(0)
    if paired:
        if a.shape[0] != b.shape[0]:
            raise ValueError("paired estimate needs equal-size inputs")
        i = j = rng.integers(a.shape[0], size=n_pairs)
    else:
        i = rng.integers(a.shape[0], size=n_pairs)
        j = rng.integers(b.shape[0], size=n_pairs)
    diff = (a[i] - b[j]) @ projector.basis
    return float(np.linalg.norm(diff, axis=1).mean())


def estimate_eta(w, projector: Projector) -> float:
    """``||W P_perp||_op``."""
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    if w.shape[1] != projector.d:
        raise ValueError("head width does not match projector dimension")
    return operator_norm(w @ projector.complement_matrix())


def _equalise(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = min(a.size, b.size)
    if a.size > n:
        a = a[np.sort(rng.choice(a.size, n, replace=False))]
    if b.size > n:
        b = b[np.sort(rng.choice(b.size, n, replace=False))]
    return a, b


def _regime(rhs: float, s_id: np.ndarray, s_ood: np.ndarray) -> tuple[float, str]:
    both = np.concatenate([s_id, s_ood])
    span = float(both.max() - both.min())
    return span, "vacuous" if rhs > span else "informative"


def check_theorem1(id_feats, ood_feats, knn: KNNScorer, projector: Projector, n_pairs: int = DEFAULT_PAIRS,
                   rng: np.random.Generator | None = None) -> BoundReport:
    """W1(kNN scores) <= L_k * eps + 4 L_k * tau^2, tau^2 the larger of the ID/OOD tail energies."""
    if knn.normalize:
        raise ValueError("the kNN bound is stated for unnormalised Euclidean features")
    rng = rng if rng is not None else np.random.default_rng(0)
    x_id, x_ood = _rows(id_feats), _rows(ood_feats)
    tau_id = estimate_tau_sq(x_id, projector)
    tau_ood = estimate_tau_sq(x_ood, projector)
    eps = estimate_eps(x_id, x_ood, projector, n_pairs, rng)
    s_id, s_ood = knn.score(x_id), knn.score(x_ood)
    lhs = wasserstein1(*_equalise(s_id, s_ood, rng))
    rhs = KNN_LIPSCHITZ * eps + 4.0 * KNN_LIPSCHITZ * max(tau_id, tau_ood)
    span, regime = _regime(rhs, s_id, s_ood)
    return BoundReport("theorem1_knn", tau_id, tau_ood, eps, 0.0, 0.0, KNN_LIPSCHITZ, 0.0,
                       lhs, rhs, span, lhs <= rhs + 1e-9, regime)


def check_prop1(id_feats, ood_feats, head, projector: Projector, score: str = "energy",
                n_pairs: int = DEFAULT_PAIRS, rng: np.random.Generator | None = None) -> BoundReport:
    """W1(S(logits)) <= ||W||_op * eps + L_S * eta * tau for S in {energy, msp}."""
    if score not in SCORE_LIPSCHITZ:
        raise ValueError(f"score must be one of {sorted(SCORE_LIPSCHITZ)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    w, b = (np.asarray(a, dtype=np.float64) for a in head)
    x_id, x_ood = _rows(id_feats), _rows(ood_feats)
    tau_id = estimate_tau_sq(x_id, projector)
    tau_ood = estimate_tau_sq(x_ood, projector)
    eps = estimate_eps(x_id, x_ood, projector, n_pairs, rng)
    eta = estimate_eta(w, projector)
    w_op = operator_norm(w)
    fn = score_energy if score == "energy" else score_msp
    s_id, s_ood = fn(head_logits(x_id, w, b)), fn(head_logits(x_ood, w, b))
    lhs = wasserstein1(*_equalise(s_id, s_ood, rng))
    l_s = SCORE_LIPSCHITZ[score]
    rhs = w_op * eps + l_s * eta * float(np.sqrt(max(tau_id, tau_ood)))
    span, regime = _regime(rhs, s_id, s_ood)
    return BoundReport(f"prop1_{score}", tau_id, tau_ood, eps, eta, w_op, 0.0, l_s,
                       lhs, rhs, span, lhs <= rhs + 1e-9, regime)


def isotropic_control(d: int = 32, k: int = 5, n: int = 1000, shift: float = 8.0,
                      rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray, Projector]:
    """Isotropic ID features with OOD displaced along the top subspace: the anti-collapse case."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x_id = rng.normal(size=(n, d))
    basis = np.eye(d)[:, :k]
    x_ood = rng.normal(size=(n, d)) + shift * basis[:, 0]
    return x_id, x_ood, Projector(basis)
