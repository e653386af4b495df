import numpy as np
import pytest

from dsclab.bounds import (
    BoundReport,
    check_prop1,
    check_theorem1,
    estimate_eps,
    estimate_eta,
    estimate_tau_sq,
    isotropic_control,
)
from dsclab.scorers import fit_knn
from dsclab.specmath import Projector, operator_norm, sym_eig

D, K = 12, 3


@pytest.fixture
def proj():
    return Projector(np.eye(D)[:, :K])


def _feats(rng, n=300, tail=0.1):
    x = np.zeros((n, D))
    x[:, :K] = rng.normal(size=(n, K)) * 2
    x[:, K:] = tail * rng.normal(size=(n, D - K))
    return x


def test_tau_is_orthogonal_energy_mean(rng, proj):
    x = _feats(rng)
    assert estimate_tau_sq(x, proj) == pytest.approx((x[:, K:] ** 2).sum(1).mean(), rel=1e-12)
    assert estimate_tau_sq(np.eye(D)[:1] * 5, proj) == 0.0


def test_eps_examples(rng, proj):
    x = _feats(rng)
    assert estimate_eps(x, x, proj, paired=True) == 0.0
    v = np.zeros(D)
    v[K:] = rng.normal(size=D - K)
    assert estimate_eps(x, x + 10 * v, proj, paired=True) == pytest.approx(0.0, abs=1e-12)
    w = np.zeros(D)
    w[:K] = rng.normal(size=K)
    w *= 2 / np.linalg.norm(w)
    assert estimate_eps(x, x + w, proj, n_pairs=50_000, paired=True) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError):
        estimate_eps(x, x, proj, n_pairs=0)


def test_eps_unpaired_converges(rng):
    # ID and OOD are point masses 2 apart inside the subspace plus small off-subspace noise
    proj = Projector(np.eye(D)[:, :K])
    a = np.zeros((400, D))
    a[:, K:] = rng.normal(size=(400, D - K))
    b = a.copy()
    b[:, 0] += 2.0
    est = estimate_eps(a, b, proj, n_pairs=20_000, rng=rng)
    assert est == pytest.approx(2.0, abs=1e-12)


def test_eps_off_subspace_shift_never_increases(rng, proj):
    x = _feats(rng)
    v = np.zeros(D)
    v[K:] = 1.0
    values = [estimate_eps(x, x + t * v + 0.5 * np.eye(D)[0], proj, rng=np.random.default_rng(0))
              for t in (0.0, 1.0, 5.0, 50.0)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_eta_examples(rng, proj):
    w = np.zeros((4, D))
    w[:, :K] = rng.normal(size=(4, K))
    assert estimate_eta(w, proj) == pytest.approx(0.0, abs=1e-8)
    assert estimate_eta(np.eye(D), proj) == pytest.approx(1.0, abs=1e-10)
    a = rng.normal(size=(5, 12))
    want = np.sqrt(sym_eig(a.T @ a)[0][0])
    assert operator_norm(a) == pytest.approx(want, abs=1e-8)


def test_w_op_rotation_invariant(rng):
    w = rng.normal(size=(4, D))
    q, _ = np.linalg.qr(rng.normal(size=(D, D)))
    assert operator_norm(w @ q.T) == pytest.approx(operator_norm(w), rel=1e-9)


def test_theorem1_identical_sets(rng, proj):
    x = _feats(rng)
    knn = fit_knn(_feats(rng), k=5, normalize=False)
    r = check_theorem1(x, x, knn, proj, n_pairs=2000, rng=rng)
    assert r.lhs_w1 == 0.0 and r.holds
    with pytest.raises(ValueError):
        check_theorem1(x, x, fit_knn(x, 5, normalize=True), proj)


def test_theorem1_holds_on_collapsed_features(rng, proj):
    for _ in range(10):
        knn = fit_knn(_feats(rng), k=5, normalize=False)
        ood = _feats(rng, n=200, tail=0.3)
        ood[:, 0] += 1.0
        r = check_theorem1(_feats(rng), ood, knn, proj, n_pairs=2000, rng=rng)
        assert r.holds
        assert all(v >= 0 for v in (r.tau_sq_id, r.tau_sq_ood, r.eps_hat, r.lhs_w1, r.rhs))


def test_prop1_zero_head(rng, proj):
    x = _feats(rng)
    head = (np.zeros((3, D)), np.array([0.1, -0.2, 0.3]))
    for score in ("energy", "msp"):
        r = check_prop1(x, _feats(rng) + 3.0, head, proj, score, n_pairs=1000, rng=rng)
        assert r.lhs_w1 == 0.0 and r.rhs == 0.0 and r.holds
    with pytest.raises(ValueError):
        check_prop1(x, x, head, proj, "odin")


def test_prop1_holds_and_constants(rng, proj):
    head = (rng.normal(size=(3, D)), rng.normal(size=3))
    for score, l_s in (("energy", 1.0), ("msp", 2.0)):
        r = check_prop1(_feats(rng), _feats(rng, tail=0.5) + np.eye(D)[0], head, proj, score, 2000, rng)
        assert r.l_s == l_s and r.holds
        assert r.w_op == pytest.approx(np.linalg.svd(head[0], compute_uv=False)[0], rel=1e-8)
        assert r.eta_hat == pytest.approx(np.linalg.svd(head[0][:, K:], compute_uv=False)[0], rel=1e-8)


def test_isotropic_control_is_vacuous():
    x_id, x_ood, proj = isotropic_control()
    knn = fit_knn(x_id[:500], k=10, normalize=False)
    r = check_theorem1(x_id[500:], x_ood, knn, proj)
    assert r.regime == "vacuous" and r.rhs > r.score_range


def test_report_row_shape(rng, proj):
    x = _feats(rng)
    r = check_theorem1(x, x, fit_knn(x, 3, normalize=False), proj, n_pairs=10)
    row = r.row()
    assert len(row) == len(BoundReport.HEADER) and row[BoundReport.HEADER.index("holds")] == 1
