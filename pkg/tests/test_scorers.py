import math

import numpy as np
import pytest

from dsclab.formats import scorer_bytes, scorer_from_bytes
from dsclab.scorers import (
    STUDENT_SCORERS,
    VARIANTS,
    ScaleScorer,
    ScorerConfig,
    fit_knn,
    fit_mds,
    fit_nci,
    fit_react,
    fit_scorer,
    fit_vim,
    fit_whiten,
    head_logits,
    mds_from_statistics,
    scale_factors,
    score_energy,
    score_msp,
)
from dsclab.specmath import FeatureMatrix


def _train(rng, n=120, d=6, c=3):
    labels = np.arange(n) % c
    return FeatureMatrix(np.abs(rng.normal(size=(n, d))) + labels[:, None], labels, c)


# logit scores


def test_msp_examples():
    assert score_msp(np.zeros((1, 4)))[0] == pytest.approx(0.25)
    assert score_msp(np.array([[100.0, 0.0, 0.0]]))[0] == pytest.approx(1.0, abs=1e-10)
    e = np.exp([1.0, 2.0, 3.0])
    assert score_msp(np.array([[1.0, 2.0, 3.0]]))[0] == pytest.approx(e[2] / e.sum(), abs=1e-14)
    with pytest.raises(ValueError):
        score_msp(np.array([[np.nan, 1.0]]))


def test_energy_examples():
    assert score_energy(np.zeros((1, 3)))[0] == pytest.approx(math.log(3))
    assert score_energy(np.array([[2.7]]))[0] == pytest.approx(2.7)
    assert score_energy(np.array([[1.0, 2.0]]), 2.0)[0] == pytest.approx(2 * math.log(math.exp(0.5) + math.e))


def test_logit_score_lipschitz(rng):
    for _ in range(1000):
        c = rng.integers(2, 8)
        a, b = rng.normal(scale=3, size=(2, 1, c))
        gap = np.linalg.norm(a - b)
        assert abs(score_energy(a)[0] - score_energy(b)[0]) <= gap * (1 + 1e-9)
        assert abs(score_msp(a)[0] - score_msp(b)[0]) <= 2 * gap * (1 + 1e-9)


# MDS / whitening


def test_mds_scalar_examples():
    mds = mds_from_statistics(np.zeros((1, 2)), np.eye(2), 0.5)
    assert mds.score(np.array([[3.0, 0.0]]))[0] == pytest.approx(-6.0, abs=1e-12)
    mds0 = mds_from_statistics(np.array([[1.0, -1.0]]), np.eye(2), 1e-9)
    assert mds0.score(np.array([[1.0, -1.0]]))[0] == 0.0


def test_mds_class_mean_is_best(rng):
    train = _train(rng)
    mds = fit_mds(train)
    s = mds.score(np.vstack([mds.class_means[1], train.data[train.labels == 1]]))
    assert s[0] == s.max()


def test_mds_shrinkage_floor(rng):
    mds = fit_mds(_train(rng))
    cov = mds.covariances[0] + mds.shrink * np.eye(mds.covariances.shape[1])
    assert np.linalg.eigvalsh(cov).min() >= mds.shrink - 1e-12
    assert mds.shrink == pytest.approx(1e-3 * np.trace(mds.covariances[0]) / 6)


def test_single_class_mds_equals_whitening(rng):
    x = rng.normal(size=(80, 5)) @ rng.normal(size=(5, 5))
    one = FeatureMatrix(x, np.zeros(80, dtype=int), 1)
    q = rng.normal(size=(30, 5))
    assert np.allclose(fit_mds(one).score(q), fit_whiten(one).score(q), rtol=0, atol=1e-10)


def test_whiten_examples(rng):
    x = rng.normal(size=(40, 3))
    wh = fit_whiten(x)
    assert wh.score(x.mean(axis=0)[None])[0] == 0.0
    iso = fit_whiten(np.vstack([np.eye(3), -np.eye(3)]) * np.sqrt(3), lambda_shrink=1e-12)
    z = np.array([[0.3, -1.0, 2.0]])
    assert iso.score(z)[0] == pytest.approx(-(z**2).sum(), rel=1e-9)


def test_mds_per_class_and_warning(rng):
    train = _train(rng)
    per = fit_mds(train, per_class=True)
    assert not np.allclose(per.covariances[0], per.covariances[1])
    with pytest.warns(UserWarning):
        fit_mds(FeatureMatrix(np.array([[0.0], [1.0], [2.0]]), np.array([0, 1, 1]), 2))


# kNN


def test_knn_examples(backend):
    store = np.array([[0.0], [10.0]])
    knn = fit_knn(store, k=1, normalize=False)
    assert knn.score(np.array([[0.0]]))[0] == 0.0
    assert knn.kth_distance(np.array([[1.0]]))[0] == 1.0
    with pytest.raises(ValueError):
        fit_knn(store, k=3)


@pytest.mark.parametrize("normalize", [False, True])
def test_knn_matches_exhaustive_sort(backend, normalize, rng):
    store = rng.normal(size=(200, 8))
    q = rng.normal(size=(50, 8))
    knn = fit_knn(store, 5, normalize)
    if normalize:
        store = store / np.linalg.norm(store, axis=1, keepdims=True)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
    dists = np.array([sorted(np.sqrt(((store - row) ** 2).sum(1))) for row in q])
    assert np.allclose(knn.kth_distance(q if not normalize else q), dists[:, 4], rtol=0, atol=1e-12)


# ViM


def test_vim_inside_subspace_equals_energy(rng):
    basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
    x = rng.normal(size=(50, 2)) @ basis.T + 1.0
    x = np.vstack([x, x[:1] + 0.5 * rng.normal(size=(1, 6))])  # keeps the residual mean nonzero
    w, b = rng.normal(size=(3, 6)), rng.normal(size=3)
    vim = fit_vim(x, (w, b), subspace_dim=2)
    inside = x[:5]
    if np.allclose(vim.residual_norm(inside), 0, atol=1e-9):
        assert np.allclose(vim.score(inside), score_energy(head_logits(inside, w, b)), atol=1e-8)


def test_vim_alpha_ratio():
    # two points along e2 (residual direction) around a centre, subspace spanned by e1
    x = np.array([[2.0, 1.0], [-2.0, -1.0], [2.0, -1.0], [-2.0, 1.0]])
    w = np.array([[3.0, 0.0], [0.0, 0.0]])
    b = np.array([0.0, 0.0])
    vim = fit_vim(x, (w, b), subspace_dim=1)
    max_logit = np.mean(np.max(x @ w.T, axis=1))
    assert vim.alpha == pytest.approx(max_logit / 1.0)
    q = np.array([[0.0, 1.0]])
    q2 = np.array([[0.0, 2.0]])
    gap = vim.score(q, logits=np.zeros((1, 2)))[0] - vim.score(q2, logits=np.zeros((1, 2)))[0]
    assert gap == pytest.approx(vim.alpha * 1.0)


def test_vim_undefined():
    x = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    with pytest.raises(ValueError, match="ViM undefined"):
        fit_vim(x, (np.eye(2), np.zeros(2)), subspace_dim=1)


# ReAct / SCALE / NCI


def test_react_examples(rng):
    x = np.abs(rng.normal(size=(40, 4)))
    w, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    r = fit_react(x, (w, b), 90)
    assert float(r.threshold) == pytest.approx(np.percentile(x, 90))
    r.threshold = np.array(x.max() + 1)
    assert np.allclose(r.score(x), score_energy(head_logits(x, w, b)))
    r.threshold = np.array(0.0)
    assert np.allclose(r.score(x), score_energy(b[None]))
    r.threshold = np.array(1.0)
    z = np.array([[0.2, 3.0, 0.5, 0.1]])
    assert r.score(z)[0] == pytest.approx(score_energy(head_logits(np.array([[0.2, 1.0, 0.5, 0.1]]), w, b))[0])
    per = fit_react(x, (w, b), 90, per_dim=True)
    assert per.threshold.shape == (4,)


def test_scale_examples(rng):
    assert np.allclose(scale_factors(np.full((2, 5), 3.0)), 1.0)
    z = np.array([[4.0, 1.0, 1.0, 1.0, 1.0]])
    assert scale_factors(z, percentile=90)[0] == pytest.approx(2.0)
    y = np.abs(rng.normal(size=(10, 7)))
    assert np.allclose(scale_factors(2 * y), scale_factors(y))
    w, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    flat = np.full((1, 5), 0.7)
    assert ScaleScorer(w, b).score(flat)[0] == pytest.approx(score_energy(head_logits(flat, w, b))[0])
    with pytest.raises(ValueError, match="degenerate activation profile"):
        scale_factors(np.zeros((1, 4)))


def test_nci_examples():
    train = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0]])
    nci = fit_nci(train, (w, np.zeros(2)), gamma=0.1)
    assert nci.score(np.array([[1.0, 0.0]]), predicted=[0])[0] == pytest.approx(1.1)
    assert nci.score(np.array([[-1.0, 0.0]]), predicted=[0])[0] == pytest.approx(-1 + 0.1)
    assert nci.score(np.array([[0.0, 0.0]]), predicted=[0])[0] == 0.0


# roster


def test_fit_scorer_roster_and_roundtrip(rng):
    train = _train(rng, n=150, d=8, c=3)
    teacher = FeatureMatrix(rng.normal(size=(150, 5)), train.labels, 3)
    head = (rng.normal(size=(3, 8)), rng.normal(size=3))
    q = np.abs(rng.normal(size=(20, 8)))
    for name in VARIANTS:
        fitted = fit_scorer(name, train, head, teacher, ScorerConfig(knn_k=3))
        back = scorer_from_bytes(scorer_bytes(fitted))
        assert type(back) is type(fitted)
        src = teacher.data[:20] if name == "TEACHER_MDS" else q
        assert np.array_equal(back.score(src), fitted.score(src))
        assert scorer_bytes(back) == scorer_bytes(fitted)
    with pytest.raises(ValueError):
        fit_scorer("ODIN", train, head)
    with pytest.raises(ValueError):
        fit_scorer("TEACHER_MDS", train, head)


@pytest.fixture(scope="module", params=[0, 1, 2])
def far_cluster(request):
    """Student on the generator defaults plus a reflected, amplified class block (far outside the training hull)."""
    from dsclab.student import TrainConfig, features, init_student, train
    from dsclab.synthgen import GeneratorSpec, gen_single_domain

    seed = request.param
    spec = GeneratorSpec(seed=seed)
    data = gen_single_domain(spec)
    init = init_student(spec.d_in, spec.c_train, 32, rng=np.random.default_rng(seed))
    student, _ = train(init, data.train.x, data.train.labels, None, TrainConfig(lambda_tgt=0.0))
    trn = FeatureMatrix(features(student, data.train.x), data.train.labels, spec.c_train)
    x_far = data.id_test.x.copy()
    x_far[:, spec.d_d:] *= -3.0
    return student, trn, features(student, data.id_test.x), features(student, x_far)


@pytest.mark.parametrize("name", STUDENT_SCORERS)
def test_orientation_far_cluster(far_cluster, name):
    student, trn, z_id, z_far = far_cluster
    fitted = fit_scorer(name, trn, student.head())
    far, near = float(fitted.score(z_far).mean()), float(fitted.score(z_id).mean())
    assert far < near, f"{name}: far-cluster mean {far:.4f} >= ID mean {near:.4f}"
