import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crossview_align.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from crossview_align.config import RunConfig, apply_overrides, config_from_text, config_to_text, load_config
from crossview_align.encoder import ConfigError


def test_checkpoint_roundtrip(tmp_path):
    t = {"b": np.arange(6, dtype=np.int64).reshape(2, 3), "a": np.array(0.1), "s": "note with spaces\n",
         "e": np.zeros((0, 4))}
    save_checkpoint(tmp_path / "c.txt", t)
    back = load_checkpoint(tmp_path / "c.txt")
    assert back["s"] == t["s"]
    assert back["b"].dtype == np.int64 and back["b"].tolist() == t["b"].tolist()
    assert back["a"].shape == () and float(back["a"]) == 0.1
    assert back["e"].shape == (0, 4)
    assert (tmp_path / "c.txt").read_text().startswith(MAGIC + "\n")
    assert not (tmp_path / "c.txt.tmp").exists()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_float_roundtrip_is_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "x.txt"
    save_checkpoint(path, {"x": arr})
    assert load_checkpoint(path)["x"].tobytes() == arr.tobytes()


def test_bad_checkpoints(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.txt")
    (tmp_path / "junk.txt").write_text("hello\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.txt")
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.txt", {"bad name": np.zeros(1)})


def test_overrides_apply():
    cfg = load_config(overrides=[("encoder.placement", "last_4"), ("encoder.depth", "6"), ("loss.lam", "0.3"),
                                 ("dam.enabled", "off"), ("optim.P", "4"), ("data.identities", "20"), ("seed", "9")])
    assert cfg.encoder.placement == (4, 5)
    assert cfg.loss.lam == 0.3 and not cfg.dam_enabled
    assert cfg.optim.batch_size == 16 and cfg.data.identities == 20 and cfg.seed == 9


def test_explicit_placement_list():
    cfg = load_config(overrides=[("encoder.placement", "0,2")])
    assert cfg.encoder.placement == (0, 2) and cfg.placement_name == "custom"


@pytest.mark.parametrize("pair", [("encoder.nope", "1"), ("bogus.x", "1"), ("optim.P", "1"), ("optim.lr", "abc"),
                                  ("dam.variant", "x"), ("color", "1"), ("loss.smoothing", "2")])
def test_bad_overrides(pair):
    with pytest.raises(ConfigError):
        load_config(overrides=[pair])


def test_config_file_with_comments(tmp_path):
    (tmp_path / "run.cfg").write_text("# run\nencoder.k = 9   # denser grid\n\noptim.epochs=3\n")
    cfg = load_config(tmp_path / "run.cfg", [("optim.epochs", "5")])
    assert cfg.encoder.k == 9 and cfg.optim.epochs == 5


def test_text_roundtrip():
    cfg = load_config(overrides=[("encoder.placement", "1,3"), ("encoder.eta_per_layer", "0.1,0.2,0.3,0.4"),
                                 ("dam.variant", "memory_bank"), ("optim.lr", "0.00123")])
    back = config_from_text(config_to_text(cfg))
    assert config_to_text(back) == config_to_text(cfg)
    assert back.encoder.eta_per_layer == (0.1, 0.2, 0.3, 0.4)


def test_default_warmup_is_sixth_of_epochs():
    assert RunConfig().optim.warmup == pytest.approx(2.0)
    cfg = apply_overrides(RunConfig(), [("optim.warmup_epochs", "0")])
    assert cfg.optim.warmup == 0.0
