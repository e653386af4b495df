import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dsclab.metrics import aupr, auroc, evaluate, fpr_at_tpr, wasserstein1

scores = st.lists(st.integers(-6, 6).map(float), min_size=1, max_size=30)


def fpr_scan(s_id, s_ood, tpr):
    """Smallest ID false-positive rate over every candidate threshold reaching the OOD recall target."""
    best = 1.0
    for t in np.unique(np.concatenate([s_id, s_ood])):
        if np.mean(s_ood <= t) >= tpr:
            best = min(best, float(np.mean(s_id <= t)))
    return best


def auroc_pairs(s_id, s_ood):
    total = 0.0
    for a in s_id:
        for b in s_ood:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(s_id) * len(s_ood))


def w1_grid(a, b, n=200_000):
    u = (np.arange(n) + 0.5) / n
    qa = np.sort(a)[np.minimum((u * len(a)).astype(int), len(a) - 1)]
    qb = np.sort(b)[np.minimum((u * len(b)).astype(int), len(b) - 1)]
    return float(np.mean(np.abs(qa - qb)))


def test_fpr_separated_and_identical():
    assert fpr_at_tpr([5.0, 6.0, 7.0], [0.0, 1.0, 2.0]) == 0.0
    s = np.arange(100.0)
    assert fpr_at_tpr(s, s, 0.95) == 0.95


def test_fpr_matches_scan(rng):
    for _ in range(50):
        s_id, s_ood = rng.normal(1, 1, 200), rng.normal(0, 1, 200)
        assert fpr_at_tpr(s_id, s_ood) == fpr_scan(s_id, s_ood, 0.95)


@given(scores, scores, st.sampled_from([0.5, 0.9, 0.95, 0.98]))
def test_fpr_scan_with_ties(a, b, tpr):
    a, b = np.array(a), np.array(b)
    assert fpr_at_tpr(a, b, tpr) == fpr_scan(a, b, tpr)


def test_fpr_errors():
    with pytest.raises(ValueError):
        fpr_at_tpr([], [1.0])
    with pytest.raises(ValueError):
        fpr_at_tpr([1.0], [1.0], 1.0)


def test_auroc_basic():
    assert auroc([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.5
    assert auroc([5.0, 6.0], [1.0, 2.0]) == 1.0


@given(scores, scores)
def test_auroc_pairwise_oracle_and_symmetry(a, b):
    assert auroc(a, b) == pytest.approx(auroc_pairs(a, b), abs=1e-12)
    assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)


def test_monotone_transform_invariance(rng):
    a, b = rng.normal(0.5, 1, 150), rng.normal(0, 1, 170)
    for f in (np.exp, lambda x: 3 * x - 2, lambda x: x**3):
        assert auroc(f(a), f(b)) == pytest.approx(auroc(a, b), abs=1e-12)
        assert fpr_at_tpr(f(a), f(b)) == fpr_at_tpr(a, b)


def test_aupr_hand_staircase():
    pos, neg = [0.9, 0.6, 0.3], [0.8, 0.5, 0.1]
    # ranking: P N P N P N -> precision at each recall step: 1, 2/3, 3/5
    assert aupr(pos, neg) == pytest.approx((1 + 2 / 3 + 3 / 5) / 3, abs=1e-15)
    assert aupr([1.0, 2.0], [3.0, 4.0], positive_is_high=False) == 1.0
    assert aupr([3.0, 4.0], [1.0, 2.0]) == 1.0


def test_aupr_chance_level(rng):
    s = rng.normal(size=400)
    assert aupr(s, s) == pytest.approx(0.5, abs=0.01)


def test_w1_examples(rng):
    a = rng.normal(size=50)
    assert wasserstein1(a, rng.permutation(a)) == 0.0
    assert wasserstein1(a, a + 2.5) == pytest.approx(2.5, abs=1e-12)
    x, y = [0.0, 1.0, 5.0], [2.0, 2.5, -1.0, 4.0, 0.3]
    assert wasserstein1(x, y) == pytest.approx(w1_grid(np.array(x), np.array(y)), abs=1e-3)


def test_w1_unequal_sizes_match_scipy(rng):
    from scipy.stats import wasserstein_distance

    for n, m in ((3, 5), (7, 11), (40, 13)):
        a, b = rng.normal(size=n), rng.exponential(size=m)
        assert wasserstein1(a, b) == pytest.approx(wasserstein_distance(a, b), abs=1e-12)


def test_w1_is_a_metric(rng):
    for _ in range(200):
        a, b, c = (rng.normal(size=rng.integers(1, 12)) for _ in range(3))
        assert wasserstein1(a, b) == wasserstein1(b, a)
        assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-12


def test_evaluate_ranges(rng):
    rec = evaluate(rng.normal(1, 1, 300), rng.normal(0, 1, 250))
    for v in (rec.fpr_at_95, rec.fpr_at_98, rec.auroc, rec.aupr_in, rec.aupr_out):
        assert 0.0 <= v <= 1.0
    assert rec.fpr_at_98 >= rec.fpr_at_95
    assert (rec.n_id, rec.n_ood) == (300, 250)
