from __future__ import annotations

from pathlib import Path

from typer.testing import CliRunner

from stereo_recon.cli import app
from stereo_recon.dataset import SceneDataset
from stereo_recon.db import RunStore
from stereo_recon.errors import EXIT_VALIDATION


runner = CliRunner()

SMALL_CONFIG = """
seed = 1
device = "cpu"

[rig]
fx = 56.0
fy = 56.0
cx = 32.0
cy = 24.0
width = 64
height = 48

[data]
train_scenes = 2
val_scenes = 1
max_objects = 2
n_surface = 64
n_queries = 64
lat_segments = 6
lon_segments = 8

[vae]
n_surface = 64
width = 32
latent_width = 8
heads = 4
n_point_tokens = 8

[encoder]
width = 32
heads = 4

[decoder]
width = 32
heads = 4
n_queries = 4
"""


def test_gen_data_writes_splits(tmp_path: Path) -> None:
    config = tmp_path / "small.toml"
    config.write_text(SMALL_CONFIG, encoding="utf-8")
    result = runner.invoke(app, ["gen-data", "--out", str(tmp_path / "data"), "--config", str(config), "--workers", "2"])
    assert result.exit_code == 0, result.output
    assert SceneDataset.load(tmp_path / "data" / "train").scene_ids() == ["000000", "000001"]
    assert SceneDataset.load(tmp_path / "data" / "val").scene_ids() == ["000002"]


def test_invalid_config_exits_with_validation_code(tmp_path: Path) -> None:
    config = tmp_path / "bad.toml"
    config.write_text("[decoder]\nn_queries = 0\n", encoding="utf-8")
    result = runner.invoke(app, ["gen-data", "--out", str(tmp_path / "data"), "--config", str(config)])
    assert result.exit_code == EXIT_VALIDATION
    result = runner.invoke(app, ["gen-data", "--out", str(tmp_path / "data"), "--config", str(tmp_path / "nope.toml")])
    assert result.exit_code == EXIT_VALIDATION


def test_interpolate_rejects_bad_object_reference(tmp_path: Path) -> None:
    result = runner.invoke(
        app,
        ["interpolate", "--vae", str(tmp_path / "vae.pt"), "--data", str(tmp_path), "--a", "000001", "--b", "000002:0",
         "--out", str(tmp_path / "out")],
    )
    assert result.exit_code == EXIT_VALIDATION


def test_encode_gt_without_dataset(tmp_path: Path) -> None:
    result = runner.invoke(app, ["encode-gt", "--vae", str(tmp_path / "vae.pt"), "--data", str(tmp_path)])
    assert result.exit_code == EXIT_VALIDATION


def test_runs_lists_ledger(tmp_path: Path) -> None:
    db = tmp_path / "runs.sqlite3"
    store = RunStore(db)
    store.init()
    run_id = store.start_run("vae", "h", {})
    store.log_step(run_id, 1, {"total": 0.25})
    result = runner.invoke(app, ["runs", "--db", str(db)])
    assert result.exit_code == 0, result.output
