import json
import math

import numpy as np
import pytest

from conftest import tiny_config
from crossview_align import train as tr
from crossview_align.objectives import SamplingError


def _losses(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_pk_batches_structure():
    ids = np.repeat(np.arange(5), 6)
    views = np.tile([0, 1], 15)
    batches = tr.pk_batches(ids, views, 2, 4, np.random.default_rng(0))
    for b in batches:
        assert len(b) == 8
        u, c = np.unique(ids[b], return_counts=True)
        assert len(u) == 2 and set(c) == {4}
        for ident in u:
            vs = views[b][ids[b] == ident]
            assert set(vs.tolist()) == {0, 1}
    used = np.concatenate(batches)
    assert len(used) == len(set(used.tolist()))


def test_pk_batches_impossible():
    with pytest.raises(SamplingError):
        tr.pk_batches(np.array([0, 0, 0, 0]), np.zeros(4, int), 2, 2, np.random.default_rng(0))


def test_lr_schedule_shape():
    cfg = tiny_config(("optim.epochs", "6"), ("optim.lr", "1e-3"))
    base = cfg.optim.scaled_lr
    assert base == pytest.approx(1e-3 * 12 / 64)
    lrs = [tr.lr_at(s, 60, 10, cfg) for s in range(60)]
    assert lrs[0] == pytest.approx(base / 10)
    assert lrs[9] == pytest.approx(base)
    assert max(lrs) == pytest.approx(base)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] < 0.01 * base


@pytest.mark.parametrize("name,expected", [
    ("blocks.0.qkv.W", True), ("blocks.0.qkv.b", False), ("classifier.W", True), ("patch.W", True),
    ("dam.W1", True), ("dam.b2", False), ("ltps.0.head.w", False), ("pos", False), ("cls", False),
])
def test_weight_decay_selection(name, expected):
    assert tr.decays(name) is expected


def test_adamw_first_step_is_sign_times_lr():
    opt = tr.AdamW(weight_decay=0.0)
    p = {"x.b": np.array([1.0, -2.0])}
    opt.step(p, {"x.b": np.array([0.3, -5.0])}, 0.1, lambda n: False)
    np.testing.assert_allclose(p["x.b"], [0.9, -1.9], atol=1e-6)


def test_adamw_skips_frozen_and_decays_weights():
    opt = tr.AdamW(weight_decay=0.5)
    p = {"a.W": np.array([2.0]), "b.W": np.array([2.0])}
    opt.step(p, {"a.W": np.zeros(1), "b.W": np.zeros(1)}, 0.1, lambda n: n == "b.W")
    assert p["a.W"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert p["b.W"][0] == 2.0


def test_training_writes_metrics_and_checkpoints(tmp_path, tiny_dataset):
    cfg = tiny_config(("optim.ckpt_every", "3"))
    res = tr.train(cfg, tiny_dataset, tmp_path)
    per_epoch = len(tr.epoch_batches(tiny_dataset.subset("train"), cfg, 0))
    total = 2 * per_epoch
    rows = _losses(tmp_path / tr.METRICS_FILE)
    assert [r["step"] for r in rows] == list(range(total))
    assert set(rows[0]) == {"step", "id", "triplet", "deform", "align", "entropy", "mask", "total"}
    assert all(math.isfinite(r["total"]) for r in rows)
    assert (tmp_path / "ckpt_step000003.txt").exists() and (tmp_path / "ckpt_step000006.txt").exists()
    state = tr.load_state(tmp_path / tr.FINAL_CKPT)
    assert state.step == res.state.step == total
    for name, value in res.state.all_params().items():
        assert state.all_params()[name].tobytes() == value.tobytes(), name


def test_same_seed_same_metrics(tmp_path, tiny_dataset):
    tr.train(tiny_config(), tiny_dataset, tmp_path / "a", max_steps=4)
    tr.train(tiny_config(), tiny_dataset, tmp_path / "b", max_steps=4)
    assert (tmp_path / "a" / tr.METRICS_FILE).read_bytes() == (tmp_path / "b" / tr.METRICS_FILE).read_bytes()


def test_resume_is_bit_identical(tmp_path, tiny_dataset):
    tr.train(tiny_config(), tiny_dataset, tmp_path / "full")
    tr.train(tiny_config(), tiny_dataset, tmp_path / "half", max_steps=3)
    tr.train(tiny_config(), tiny_dataset, tmp_path / "half", resume=tmp_path / "half" / tr.FINAL_CKPT)
    assert (tmp_path / "full" / tr.METRICS_FILE).read_bytes() == (tmp_path / "half" / tr.METRICS_FILE).read_bytes()


@pytest.mark.parametrize("variant", ["memory_bank", "classification_matrix"])
def test_dam_variants_train(tmp_path, tiny_dataset, variant):
    res = tr.train(tiny_config(("dam.variant", variant)), tiny_dataset, max_steps=3)
    assert len(res.breakdowns) == 3
    assert all(math.isfinite(b.total) and b.align > 0 for b in res.breakdowns)


def test_dam_disabled_leaves_generator(tiny_dataset):
    res = tr.train(tiny_config(("dam.enabled", "false")), tiny_dataset, max_steps=2)
    assert all(b.align == 0.0 and b.entropy == 0.0 for b in res.breakdowns)


def test_nan_aborts_with_dump(tmp_path, tiny_dataset):
    cfg = tiny_config()
    ds = tiny_dataset
    poisoned = type(ds)(ds.images.copy(), ds.identities, ds.views, ds.splits, ds.paths)
    poisoned.images[:] = np.nan
    with pytest.raises(tr.NanLossError) as info:
        tr.train(cfg, poisoned, tmp_path)
    assert info.value.step == 0
    assert json.loads((tmp_path / "nan_dump.json").read_text())["step"] == 0


def test_resume_rejects_other_identities(tmp_path, tiny_dataset):
    tr.train(tiny_config(), tiny_dataset, tmp_path, max_steps=1)
    other = tiny_dataset.subset("test")
    other.splits = np.array(["train"] * len(other))
    with pytest.raises(ValueError):
        tr.train(tiny_config(), other, resume=tmp_path / tr.FINAL_CKPT)
