import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsclab.specmath import (
    CovarianceSplit,
    FeatureMatrix,
    Projector,
    class_subspace,
    covariance_split,
    nullspace_audit,
    operator_norm,
    orthogonal_energy,
    spectral_summary,
    spectrum_measures,
    sym_eig,
)


def _split_from_cov(cov):
    d = cov.shape[0]
    z = np.zeros((d, d))
    return CovarianceSplit(cov, z, cov.copy(), np.zeros((1, d)), np.zeros(d), np.ones(1))


def _random_feats(rng, n=50, d=8, c=3):
    labels = np.arange(n) % c
    return FeatureMatrix(rng.normal(size=(n, d)) + labels[:, None], labels, c)


# covariance_split


def test_split_two_points():
    f = FeatureMatrix(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]), 2)
    s = covariance_split(f)
    assert np.array_equal(s.sigma_within, np.zeros((2, 2)))
    assert np.array_equal(s.sigma_between, [[1.0, 0.0], [0.0, 0.0]])


def test_split_identical_points():
    f = FeatureMatrix(np.tile([2.0, -1.0, 5.0], (6, 1)), np.arange(6) % 2, 2)
    s = covariance_split(f)
    for m in (s.sigma_total, s.sigma_between, s.sigma_within):
        assert np.array_equal(m, np.zeros((3, 3)))


def test_split_total_matches_two_pass_covariance(rng):
    f = _random_feats(rng)
    s = covariance_split(f)
    x = f.data
    mean = [sum(x[i, j] for i in range(f.n)) / f.n for j in range(f.d)]
    oracle = np.zeros((f.d, f.d))
    for row in x:
        dev = row - mean
        oracle += np.outer(dev, dev)
    oracle /= f.n
    assert np.linalg.norm(s.sigma_total - oracle) < 1e-10


def test_split_invariants(rng):
    f = _random_feats(rng, n=90, d=10, c=4)
    s = covariance_split(f)
    assert np.linalg.norm(s.sigma_total - s.sigma_between - s.sigma_within) <= 1e-9 * np.linalg.norm(s.sigma_total)
    assert math.isclose(s.class_priors.sum(), 1.0)
    vals = np.linalg.eigvalsh(s.sigma_between)[::-1]
    assert np.all(vals[3:] <= 1e-9 * vals[0])


def test_split_rejects_empty_class_and_single_row():
    with pytest.raises(ValueError, match="class has no samples"):
        covariance_split(FeatureMatrix(np.zeros((3, 2)), np.array([0, 0, 2]), 3))
    with pytest.raises(ValueError):
        covariance_split(FeatureMatrix(np.zeros((1, 2)), np.array([0]), 1))


def test_feature_matrix_validation():
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan]]), np.array([0]), 1)
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 2)), np.array([0, 3]), 3)


# sym_eig


def test_sym_eig_diagonal():
    vals, vecs = sym_eig(np.diag([3.0, 1.0, 2.0]))
    assert np.array_equal(vals, [3.0, 2.0, 1.0])
    assert np.array_equal(np.abs(vecs), np.eye(3)[:, [0, 2, 1]])


def test_sym_eig_2x2_hand_case():
    vals, vecs = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    assert np.allclose(vals, [3.0, 1.0], atol=1e-14)
    r = 1 / np.sqrt(2)
    assert np.allclose(np.abs(vecs[:, 0]), [r, r], atol=1e-14)
    assert np.allclose(abs(vecs[:, 1] @ np.array([r, -r])), 1.0, atol=1e-14)


@pytest.mark.parametrize("d", [5, 16, 40])
def test_sym_eig_matches_lapack(backend, d, rng):
    a = rng.normal(size=(d, d))
    m = (a + a.T) / 2
    vals, vecs = sym_eig(m)
    assert np.allclose(vals, np.linalg.eigvalsh(m)[::-1], atol=1e-10)
    assert np.linalg.norm(vecs @ np.diag(vals) @ vecs.T - m) < 1e-8 * np.linalg.norm(m)
    assert np.allclose(vecs.T @ vecs, np.eye(d), atol=1e-8)


def test_sym_eig_sign_convention(rng):
    a = rng.normal(size=(9, 9))
    _, vecs = sym_eig(a + a.T)
    idx = np.argmax(np.abs(vecs), axis=0)
    assert np.all(vecs[idx, np.arange(9)] > 0)


def test_sym_eig_errors():
    with pytest.raises(ValueError, match="symmetric"):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="non-finite"):
        sym_eig(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        sym_eig(np.zeros((2, 3)))


# spectral measures


def test_identity_spectrum_is_exact():
    for d in (1, 3, 10, 32, 77):
        s = spectral_summary(_split_from_cov(np.eye(d)))
        assert s.r_eff == d and s.pr == d


def test_rank_one_spectrum():
    r_eff, pr = spectrum_measures([1.0, 0.0, 0.0, 0.0])
    assert r_eff == 1.0 and pr == 1.0


def test_hand_spectrum():
    r_eff, pr = spectrum_measures([0.5, 0.25, 0.25])
    assert pr == pytest.approx(1 / 0.375, abs=1e-12)
    assert r_eff == pytest.approx(math.exp(-(0.5 * math.log(0.5) + 0.5 * math.log(0.25))), abs=1e-12)
    assert r_eff == pytest.approx(2.828427, abs=1e-6)


@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=40).filter(lambda v: max(v) > 1e-6))
def test_measures_match_direct_formula(values):
    lam = np.array(values)
    r_eff, pr = spectrum_measures(lam)
    lam = np.where(lam < 1e-12 * lam.max(), 0.0, lam)
    p = [v / lam.sum() for v in lam if v > 0]
    ent = -math.fsum(q * math.log(q) for q in p)
    assert r_eff == pytest.approx(math.exp(ent), rel=1e-10)
    assert pr == pytest.approx(lam.sum() ** 2 / (lam**2).sum(), rel=1e-10)
    assert 1 - 1e-12 <= pr <= lam.size + 1e-9
    assert 1 - 1e-12 <= r_eff <= lam.size + 1e-9


def test_summary_rho_monotone_and_scale_invariant(rng):
    f = _random_feats(rng, n=80, d=12, c=4)
    s1 = spectral_summary(covariance_split(f), [1, 3, 6, 12])
    ks = sorted(s1.rho_k)
    assert all(s1.rho_k[a] <= s1.rho_k[b] + 1e-15 for a, b in zip(ks, ks[1:]))
    assert s1.rho_k[12] == pytest.approx(1.0, abs=1e-12)
    s2 = spectral_summary(covariance_split(FeatureMatrix(3.7 * f.data, f.labels, 4)), [1, 3, 6, 12])
    assert s2.r_eff == pytest.approx(s1.r_eff, abs=1e-9)
    assert s2.pr == pytest.approx(s1.pr, abs=1e-9)
    assert s2.rho_within == pytest.approx(s1.rho_within, abs=1e-9)
    for k in ks:
        assert s2.rho_k[k] == pytest.approx(s1.rho_k[k], abs=1e-9)


def test_summary_default_k_list():
    s = spectral_summary(_split_from_cov(np.diag([4.0, 2.0, 1.0, 1.0])))
    assert sorted(s.rho_k) == [1, 4]  # C - 1 = 0 clips to 1; 64 > d is dropped
    s = spectral_summary(CovarianceSplit(np.eye(3), np.zeros((3, 3)), np.eye(3), np.zeros((3, 3)), np.zeros(3),
                                         np.ones(3) / 3))
    assert sorted(s.rho_k) == [2, 3]


def test_summary_zero_trace():
    with pytest.raises(ValueError, match="degenerate covariance"):
        spectral_summary(_split_from_cov(np.zeros((3, 3))))


# projectors


def test_class_subspace_diag():
    p = class_subspace(_split_from_cov(np.diag([3.0, 2.0, 1.0])), 1)
    assert np.allclose(p.matrix(), np.diag([1.0, 0.0, 0.0]))
    full = class_subspace(_split_from_cov(np.diag([3.0, 2.0, 1.0])), 3)
    assert np.allclose(full.matrix(), np.eye(3))
    assert np.allclose(full.complement_matrix(), 0.0)
    with pytest.raises(ValueError):
        class_subspace(_split_from_cov(np.eye(3)), 4)


def test_projector_pythagoras_and_idempotence(rng):
    p = class_subspace(covariance_split(_random_feats(rng, n=20, d=6, c=3)), 2)
    x = rng.normal(size=(100, 6))
    lhs = (p.project(x) ** 2).sum(1) + (p.residual(x) ** 2).sum(1)
    assert np.allclose(lhs, (x**2).sum(1), atol=1e-10)
    assert np.allclose(p.project(p.project(x)), p.project(x), atol=1e-8)
    assert np.allclose(p.basis.T @ p.basis, np.eye(2), atol=1e-8)


def test_orthogonal_energy_examples(rng):
    basis = np.eye(4)[:, :2]
    p = Projector(basis)
    e, mean = orthogonal_energy(np.array([[1.0, -2.0, 0.0, 0.0]]), p)
    assert e[0] == 0.0 and mean == 0.0
    e, _ = orthogonal_energy(np.array([[0.0, 0.0, 0.0, 2.0]]), p)
    assert e[0] == 4.0
    x = rng.normal(size=(30, 4))
    e, _ = orthogonal_energy(x, p)
    assert np.allclose(e, (x**2).sum(1) - (p.project(x) ** 2).sum(1), atol=1e-10)
    with pytest.raises(ValueError, match="dimension"):
        orthogonal_energy(np.zeros((2, 3)), p)


def test_nullspace_audit_shift(rng):
    p = Projector(np.eye(5)[:, :2])
    x_id = np.zeros((40, 5))
    x_id[:, :2] = rng.normal(size=(40, 2))
    delta = 1.5
    x_ood = x_id + delta * np.eye(5)[3]
    a = nullspace_audit(x_id, x_ood, p)
    assert a.ood_mean == pytest.approx(a.id_mean + delta**2)
    assert a.separated
    same = nullspace_audit(x_id, x_id, p)
    assert not same.separated and same.id_mean == same.ood_mean
    with pytest.raises(ValueError):
        nullspace_audit(np.zeros((0, 5)), x_id, p)


def test_operator_norm_matches_svd(rng):
    a = rng.normal(size=(5, 12))
    want = np.sqrt(sym_eig(a.T @ a)[0][0])
    assert operator_norm(a) == pytest.approx(want, rel=1e-8)
    assert operator_norm(np.zeros((3, 3))) == 0.0
