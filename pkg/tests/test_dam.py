import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossview_align import dam
from crossview_align.gradcheck import mask_checks
from crossview_align.numeric_core import NumericalError, finite_diff_check


def test_single_sample_prototype_is_normalized_feature():
    t = dam.compute_prototypes(np.array([[3.0, 4.0], [0.0, -2.0]]), [5, 2])
    np.testing.assert_array_equal(t.class_ids, [2, 5])
    np.testing.assert_allclose(t.prototypes, [[0.0, -1.0], [0.6, 0.8]])
    np.testing.assert_array_equal(t.counts, [1, 1])


def test_symmetric_pair():
    t = dam.compute_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0])
    np.testing.assert_allclose(t.prototypes, [[0.70710678, 0.70710678]], atol=1e-8)


def test_normalization_before_averaging():
    # scale of a member must not matter
    a = dam.compute_prototypes(np.array([[100.0, 0.0], [0.0, 1.0]]), [0, 0])
    np.testing.assert_allclose(a.prototypes, [[2 ** -0.5, 2 ** -0.5]], atol=1e-12)


def test_zero_feature_refused():
    with pytest.raises(NumericalError):
        dam.compute_prototypes(np.zeros((2, 3)), [0, 1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_table_invariants_and_order_independence(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=12)
    f = rng.normal(size=(12, 6))
    t = dam.compute_prototypes(f, labels)
    assert len(set(t.class_ids.tolist())) == len(t.class_ids)
    np.testing.assert_allclose(np.linalg.norm(t.prototypes, axis=1), 1.0, atol=1e-9)
    perm = rng.permutation(12)
    t2 = dam.compute_prototypes(f[perm], labels[perm])
    assert t2.prototypes.tobytes() == t.prototypes.tobytes()


def test_rows_for_unknown_class():
    t = dam.compute_prototypes(np.eye(2), [0, 1])
    with pytest.raises(KeyError):
        t.rows_for([7])


def test_prototype_backward():
    rng = np.random.default_rng(3)
    labels = np.array([0, 0, 1, 1, 1])
    f = rng.normal(size=(5, 4))
    R = rng.normal(size=(2, 4))
    t, cache = dam.compute_prototypes(f, labels, return_cache=True)
    df = dam.compute_prototypes_backward(t, cache, R)
    fn = lambda x: float(np.sum(dam.compute_prototypes(x, labels).prototypes * R))
    assert finite_diff_check(fn, f, df).passed


def test_zero_generator_gives_half_masks():
    m = dam.generate_mask(np.random.default_rng(0).normal(size=(3, 6)), dam.MaskGenerator.init(6))
    np.testing.assert_array_equal(m, 0.5)


def test_large_bias_saturates():
    gen = dam.MaskGenerator.init(4)
    gen.b2 = np.array([40.0, 0.0, 0.0, 0.0])
    m = dam.generate_mask(np.ones((1, 4)), gen)
    assert 1.0 - 1e-12 < m[0, 0] <= 1.0
    assert dam.generate_mask(np.ones((1, 4)), dam.MaskGenerator.init(4, None))[0, 1] == 0.5


def test_sigmoid_extremes_are_finite():
    gen = dam.MaskGenerator.init(2)
    gen.b2 = np.array([-1000.0, 1000.0])
    m = dam.generate_mask(np.zeros((1, 2)), gen)
    assert np.all(np.isfinite(m)) and m[0, 0] == 0.0 and m[0, 1] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_masks_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    gen = dam.MaskGenerator.init(8, rng, scale=1.0)
    m = dam.generate_mask(rng.normal(size=(5, 8)), gen)
    assert np.all((m >= 0.0) & (m <= 1.0))


@pytest.mark.parametrize("seed", range(3))
def test_mask_generator_gradients(seed):
    reports = mask_checks(seed)
    assert all(r.passed for r in reports), [str(r) for r in reports if not r.passed]


def test_mask_prototype_examples():
    p = np.array([0.3, -0.5, 0.8])
    np.testing.assert_array_equal(dam.mask_prototype(p, np.ones(3)), p)
    np.testing.assert_array_equal(dam.mask_prototype(p, np.full(3, 0.5)), p / 2)
    out = dam.mask_prototype(np.array([0.0, 1.0, 0.0]), np.array([0.2, 0.7, 0.9]))
    np.testing.assert_array_equal(np.nonzero(out)[0], [1])
    with pytest.raises(ValueError):
        dam.mask_prototype(p, np.ones(2))


def _batch(ids, vecs):
    vecs = np.asarray(vecs, dtype=float)
    return dam.PrototypeTable(np.asarray(ids), vecs / np.linalg.norm(vecs, axis=1, keepdims=True), np.ones(len(ids), int))


def test_bank_momentum_one_keeps_entries():
    bank = dam.MemoryBank.empty(3, 2)
    cfg = dam.DamConfig("memory_bank", momentum=1.0)
    dam.select_prototypes(cfg, _batch([1], [[1.0, 0.0]]), bank)
    out = dam.select_prototypes(cfg, _batch([1], [[0.0, 1.0]]), bank)
    np.testing.assert_allclose(out.prototypes, [[1.0, 0.0]])


def test_bank_momentum_zero_replaces():
    bank = dam.MemoryBank.empty(3, 2)
    cfg = dam.DamConfig("memory_bank", momentum=0.0)
    dam.select_prototypes(cfg, _batch([1], [[1.0, 0.0]]), bank)
    out = dam.select_prototypes(cfg, _batch([1], [[0.0, 1.0]]), bank)
    np.testing.assert_allclose(out.prototypes, [[0.0, 1.0]])


def test_bank_mixes_and_renormalizes():
    bank = dam.MemoryBank.empty(2, 2)
    cfg = dam.DamConfig("memory_bank", momentum=0.5)
    dam.select_prototypes(cfg, _batch([0], [[1.0, 0.0]]), bank)
    out = dam.select_prototypes(cfg, _batch([0], [[0.0, 1.0]]), bank)
    np.testing.assert_allclose(out.prototypes, [[2 ** -0.5, 2 ** -0.5]], atol=1e-12)
    assert bank.filled.tolist() == [True, False]


def test_bank_first_sight_falls_back_to_batch():
    bank = dam.MemoryBank.empty(4, 2)
    out = dam.select_prototypes(dam.DamConfig("memory_bank", momentum=0.9), _batch([2], [[3.0, 4.0]]), bank)
    np.testing.assert_allclose(out.prototypes, [[0.6, 0.8]])


def test_classifier_rows_one_hot():
    W = np.eye(3) * 5.0
    out = dam.select_prototypes(dam.DamConfig("classification_matrix"), _batch([0, 2], [[1, 0, 0], [0, 0, 1]]),
                                classifier_rows=W)
    np.testing.assert_allclose(out.prototypes, [[1, 0, 0], [0, 0, 1]])


def test_variant_inputs_required():
    b = _batch([0], [[1.0, 0.0]])
    with pytest.raises(ValueError):
        dam.select_prototypes(dam.DamConfig("memory_bank"), b)
    with pytest.raises(ValueError):
        dam.select_prototypes(dam.DamConfig("classification_matrix"), b)
    with pytest.raises(ValueError):
        dam.DamConfig("other")


def test_training_step_with_features_at_prototypes():
    f = np.array([[0.6, 0.8], [0.6, 0.8], [1.0, 0.0], [1.0, 0.0]])
    before = f.copy()
    out = dam.dam_training_step(f, [0, 0, 1, 1], dam.MaskGenerator.init(2), dam.DamConfig())
    np.testing.assert_array_equal(out.masked_features, out.masked_prototypes)
    np.testing.assert_array_equal(out.masks, 0.5)
    np.testing.assert_array_equal(out.masked_features, f / 2)
    np.testing.assert_array_equal(f, before)


@pytest.mark.parametrize("variant", ["inner_batch", "classification_matrix"])
def test_dam_backward_routes_gradients(variant):
    rng = np.random.default_rng(9)
    labels = np.array([0, 0, 1, 1, 2, 2])
    f = rng.normal(size=(6, 4))
    W = rng.normal(size=(3, 4))
    gen = dam.MaskGenerator.init(4, rng, scale=0.5)
    cfg = dam.DamConfig(variant)
    Rm, Rp = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))

    def loss(f_, W_):
        o = dam.dam_training_step(f_, labels, gen, cfg, classifier_rows=W_)
        return float(np.sum(o.masks * Rm) + np.sum(o.prototypes * Rp))

    out = dam.dam_training_step(f, labels, gen, cfg, classifier_rows=W)
    df, _, dW = dam.dam_backward(out, f, labels, gen, cfg, Rm, Rp, classifier_rows=W)
    assert finite_diff_check(lambda x: loss(x, W), f, df).passed
    if variant == "classification_matrix":
        assert finite_diff_check(lambda x: loss(f, x), W, dW).passed
    else:
        assert dW is None
