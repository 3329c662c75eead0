import json

import pytest

from conftest import TINY
from crossview_align import ablate as ab
from crossview_align.bench import bench
from crossview_align.cli import main
from crossview_align.encoder import EncoderConfig

SETS = [a for k, v in TINY for a in ("--set", f"{k}={v}")]


def test_generate_train_eval(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["generate", "--out", str(data), "--seed", "2"] + SETS) == 0
    assert (data / "manifest.csv").exists()
    assert main(["train", "--data", str(data), "--out", str(run), "--steps", "2"] + SETS) == 0
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 2
    assert main(["eval", str(run / "checkpoint.txt"), "--data", str(data), "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert "A<->G" in out
    payload = json.loads((run / "eval.json").read_text())
    assert [p["protocol"] for p in payload] == ["ALL", "G<->G", "A<->A", "A<->G"]
    assert main(["eval", str(run / "checkpoint.txt"), "--data", str(data), "--protocol", "AG"]) == 0


def test_global_flags_before_subcommand(tmp_path):
    assert main(["--out", str(tmp_path / "d"), "--set", "data.identities=2", "--set", "data.samples_per_view=1",
                 "generate"]) == 0
    assert len((tmp_path / "d" / "manifest.csv").read_text().splitlines()) == 5


def test_unknown_config_key_exits_2(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "encoder.bogus=1"]) == 2
    assert "bogus" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(tmp_path):
    assert main(["eval", str(tmp_path / "none.txt"), "--data", str(tmp_path)]) == 2


def test_warp_demo(tmp_path):
    assert main(["warp-demo", "--out", str(tmp_path), "--angle", "45", "--jitter", "0.1"]) == 0
    for name in ("original.ppm", "warped.ppm", "grid.csv"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "original.ppm").read_bytes()[:2] == b"P6"


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "24/24 checks passed" in capsys.readouterr().out


def test_bench_command(tmp_path):
    small = ["--set", "encoder.depth=2", "--set", "encoder.dim=16", "--set", "encoder.heads=2"]
    assert main(["bench", "--out", str(tmp_path), "--batch", "2"] + small) == 0
    report = json.loads((tmp_path / "bench.json").read_text())
    assert report["passes"] == 100 and report["median_with_s"] > 0


def test_bench_rejects_too_few_passes():
    assert main(["bench", "--passes", "10"]) == 2


def test_identical_placements_have_zero_overhead():
    cfg = EncoderConfig(depth=2, dim=16, heads=2, placement=())
    report = bench(cfg, placement_with=(), placement_without=(), batch=2)
    assert report.overhead == 0.0


def test_ablate_command_writes_valid_csv(tmp_path):
    args = ["ablate", "--axis", "dam", "--seeds", "1", "--out", str(tmp_path), "--set", "optim.epochs=1"]
    assert main(args + SETS) == 0
    rows = ab.validate_csv(tmp_path / "dam.csv")
    assert [r["setting"] for r in rows] == ["Inner-Batch", "Memory Bank", "Classification Matrix"]


def test_validate_csv_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("setting,x\n")
    with pytest.raises(ValueError):
        ab.validate_csv(bad)
    row = ab.AblationRow("s", {c: 150.0 for c in ab.CSV_COLUMNS[1:]})
    ab.write_csv(bad, [row])
    with pytest.raises(ValueError):
        ab.validate_csv(bad)


def test_axes_cover_tables():
    assert ab.MAIN_AXES == ("control_points", "placement", "dam", "rotation")
    assert [name for name, _ in ab.AXES["control_points"]] == ["4", "9", "16", "25", "36"]
    assert len(ab.CSV_COLUMNS) == 13
    with pytest.raises(ValueError):
        ab.ablate("colour", None, [1], None)
