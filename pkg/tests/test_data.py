import csv

import numpy as np
import pytest

from crossview_align.data import SyntheticSpec, generate_dataset, load_dataset
from crossview_align.pnm import read_pnm, write_pgm, write_ppm


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_identical_tree(tmp_path):
    spec = SyntheticSpec(identities=3, samples_per_view=2, seed=5)
    generate_dataset(spec, tmp_path / "a")
    generate_dataset(spec, tmp_path / "b")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate_dataset(SyntheticSpec(identities=2, samples_per_view=1, seed=1), tmp_path / "a")
    generate_dataset(SyntheticSpec(identities=2, samples_per_view=1, seed=2), tmp_path / "b")
    assert _tree(tmp_path / "a") != _tree(tmp_path / "b")


def test_manifest_counts(tmp_path):
    manifest = generate_dataset(SyntheticSpec(identities=10, samples_per_view=4), tmp_path)
    with open(manifest) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 80
    assert list(rows[0]) == ["path", "identity", "view", "split"]
    assert {r["view"] for r in rows} == {"ground", "aerial"}
    train_ids = {r["identity"] for r in rows if r["split"] == "train"}
    test_ids = {r["identity"] for r in rows if r["split"] == "test"}
    assert len(train_ids) == 5 and not train_ids & test_ids


def test_no_occlusion_when_probability_zero(tmp_path):
    generate_dataset(SyntheticSpec(identities=4, samples_per_view=3, occlusion_prob=0.0), tmp_path)
    with open(tmp_path / "metadata.csv") as fh:
        assert all(r["occluded"] == "0" for r in csv.DictReader(fh))


def test_aerial_angles_within_range(tmp_path):
    generate_dataset(SyntheticSpec(identities=4, samples_per_view=3, angle_min=-20, angle_max=35), tmp_path)
    with open(tmp_path / "metadata.csv") as fh:
        angles = [float(r["angle_deg"]) for r in csv.DictReader(fh) if "_a" in r["path"]]
    assert angles and all(-20 <= a <= 35 for a in angles)


def test_loaded_dataset_shapes(tmp_path):
    generate_dataset(SyntheticSpec(identities=2, samples_per_view=2, image_h=32, image_w=16), tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.images.shape == (8, 1, 32, 16)
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
    assert len(ds.subset("train")) == 4


@pytest.mark.parametrize("kwargs", [{"identities": 1}, {"angle_min": -100.0}, {"squash_min": 0.0},
                                    {"train_fraction": 1.0}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SyntheticSpec(**kwargs).validate()


def test_pgm_roundtrip_quantizes(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "x.pgm", img)
    back = read_pnm(tmp_path / "x.pgm")
    assert back.shape == (3, 4)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_ppm_header(tmp_path):
    write_ppm(tmp_path / "x.ppm", np.zeros((2, 5)))
    data = (tmp_path / "x.ppm").read_bytes()
    assert data.startswith(b"P6\n5 2\n255\n") and len(data) == len(b"P6\n5 2\n255\n") + 30
