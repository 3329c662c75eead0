import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossview_align import objectives as obj
from crossview_align.gradcheck import loss_checks

# high-precision scalar evaluations of the binary entropy
H_AT_CLAMP = 1.711809560095831812e-6
H_AT_0_9 = 0.3250829733914482395


def _brute_triplet(feat, labels, margin):
    n = len(labels)
    total = 0.0
    for i in range(n):
        dp = max(np.linalg.norm(feat[i] - feat[j]) for j in range(n) if j != i and labels[j] == labels[i])
        dn = min(np.linalg.norm(feat[i] - feat[j]) for j in range(n) if labels[j] != labels[i])
        total += max(dp - dn + margin, 0.0)
    return total / n


def test_uniform_logits():
    assert obj.id_loss(np.zeros((3, 4)), [0, 1, 3]) == pytest.approx(math.log(4), abs=1e-12)


def test_confident_logits():
    logits = np.array([[30.0, 0.0, 0.0], [0.0, 0.0, 30.0]])
    assert obj.id_loss(logits, [0, 2]) <= 1e-9


def test_smoothed_ce_against_scalar_formula():
    g, s = 8.0, 0.1
    p0 = math.exp(g) / (math.exp(g) + 1.0)
    expected = -((1 - s + s / 2) * math.log(p0) + (s / 2) * math.log(1 - p0))
    assert obj.id_loss(np.array([[g, 0.0]]), [0], smoothing=s) == pytest.approx(expected, abs=1e-12)


def test_id_labels_out_of_range():
    with pytest.raises(ValueError):
        obj.id_loss(np.zeros((1, 3)), [3])


def test_triplet_satisfied_margin():
    # every anchor: hardest positive 0.2, hardest negative 0.9
    feat = np.array([[0.0], [0.2], [1.1], [1.3]])
    assert obj.triplet_loss(feat, [0, 0, 1, 1], 0.3) == 0.0


def test_triplet_hinge_arithmetic():
    y = math.sqrt(0.2)
    feat = np.array([[0.0, 0.0], [0.8, 0.0], [0.4, y], [0.4, -y]])
    # class-0 anchors see d_ap = 0.8, d_an = 0.6 -> 0.5 each
    expected = (0.5 + 0.5 + 2 * (2 * y - 0.6 + 0.3)) / 4
    assert obj.triplet_loss(feat, [0, 0, 1, 1], 0.3) == pytest.approx(expected, abs=1e-6)


def test_triplet_identical_features():
    assert obj.triplet_loss(np.ones((4, 3)), [0, 0, 1, 1], 0.3) == pytest.approx(0.3, abs=1e-12)


@pytest.mark.parametrize("labels", [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 1]])
def test_triplet_requires_pk_batch(labels):
    with pytest.raises(obj.SamplingError):
        obj.triplet_loss(np.zeros((len(labels), 2)), labels)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_triplet_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 3)
    feat = rng.normal(size=(9, 4))
    assert obj.triplet_loss(feat, labels, 0.3) == pytest.approx(_brute_triplet(feat, labels, 0.3), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_triplet_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), 2)
    feat = rng.normal(size=(8, 3))
    perm = rng.permutation(8)
    a = obj.triplet_loss(feat, labels)
    assert a >= 0.0
    assert obj.triplet_loss(feat[perm], labels[perm]) == pytest.approx(a, abs=1e-12)


@pytest.mark.parametrize("angles,expected", [
    ([0.0, 0.0, 0.0], 0.0), ([math.pi / 4, -math.pi / 4], math.pi / 4), ([math.pi / 6], math.pi / 6), ([], 0.0),
])
def test_deformation_values(angles, expected):
    assert obj.deformation_loss(angles) == pytest.approx(expected, abs=1e-12)


def test_align_identical_arguments():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 6))
    m = rng.uniform(0.1, 0.9, size=(5, 6))
    assert obj.align_loss(m, f, f) == pytest.approx(0.0, abs=1e-12)


def test_align_orthogonal_units():
    loss = obj.align_loss(np.ones((1, 2)), np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(2.0, abs=1e-10)


def test_align_guard_on_zero_mask():
    m = np.zeros((2, 3))
    f = np.ones((2, 3))
    assert np.isfinite(obj.align_loss(m, f, f))
    assert obj.align_guard_count(m, f, f) == 4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_align_bounded(seed):
    rng = np.random.default_rng(seed)
    m = rng.uniform(0.01, 1.0, size=(4, 5))
    v = obj.align_loss(m, rng.normal(size=(4, 5)), rng.normal(size=(4, 5)))
    assert 0.0 <= v <= 4.0 + 1e-12


def test_entropy_values():
    assert obj.entropy_loss(np.full((3, 4), 0.5)) == pytest.approx(math.log(2), abs=1e-12)
    assert obj.entropy_loss(np.full((2, 2), 1 - 1e-7)) == pytest.approx(H_AT_CLAMP, rel=1e-6)
    assert obj.entropy_loss(np.array([[0.9, 0.1]])) == pytest.approx(H_AT_0_9, abs=1e-12)


def test_entropy_clamps_saturated_masks():
    v = obj.entropy_loss(np.array([[0.0, 1.0]]))
    assert np.isfinite(v) and v == pytest.approx(H_AT_CLAMP, rel=1e-6)
    np.testing.assert_array_equal(obj.entropy_loss_grad(np.array([[0.0, 1.0]])), 0.0)


def test_mask_and_total_composition():
    assert obj.mask_loss(0.4, 0.7, 0.0) == 0.4
    assert obj.mask_loss(0.4, 0.7, 0.1) == pytest.approx(0.47, abs=1e-12)
    with pytest.raises(ValueError):
        obj.mask_loss(0.4, 0.7, -1.0)
    cfg = obj.LossConfig(lam=0.0, alpha=1.0, beta=1.0)
    bd = obj.total_loss(1.0, 0.5, 0.2, 0.4, 0.9, cfg)
    assert bd.total == pytest.approx(2.1, abs=1e-12)
    bd = obj.total_loss(1.0, 0.5, 0.2, 0.4, 0.9, obj.LossConfig(alpha=0.0, beta=0.0))
    assert bd.total == 1.5


@settings(max_examples=50, deadline=None)
@given(*[st.floats(0, 10) for _ in range(5)], st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_breakdown_identities(i, t, d, a, e, lam, alpha, beta):
    bd = obj.total_loss(i, t, d, a, e, obj.LossConfig(lam=lam, alpha=alpha, beta=beta))
    assert abs(bd.mask - (a + lam * e)) <= 1e-12 * max(1.0, abs(bd.mask))
    assert abs(bd.total - (i + t + alpha * d + beta * bd.mask)) <= 1e-12 * max(1.0, abs(bd.total))


def test_breakdown_json():
    bd = obj.total_loss(1.0, 0.5, 0.2, 0.4, 0.9, obj.LossConfig())
    assert bd.to_json(3).startswith('{"step": 3, "id": 1.0')


@pytest.mark.parametrize("kwargs", [{"lam": -1.0}, {"smoothing": 1.0}])
def test_loss_config_validation(kwargs):
    with pytest.raises(ValueError):
        obj.LossConfig(**kwargs)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(seed):
    reports = loss_checks(seed)
    assert all(r.passed for r in reports), [str(r) for r in reports if not r.passed]
