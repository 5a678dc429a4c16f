from __future__ import annotations

from pathlib import Path

import pytest

from stereo_recon.config import RunConfig, load_config
from stereo_recon.dataset import generate_scene, write_manifest, write_scene


TINY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "tiny.toml"


@pytest.fixture(autouse=True)
def _no_env_overrides(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("RUN_SEED", raising=False)
    monkeypatch.delenv("RUN_DEVICE", raising=False)


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return load_config(TINY_CONFIG)


@pytest.fixture
def tiny_dataset(tmp_path: Path, tiny_cfg: RunConfig) -> Path:
    """Three generated scenes under ``tmp_path / "train"``."""
    root = tmp_path / "train"
    for index in range(3):
        write_scene(root, generate_scene(tiny_cfg, index, tiny_cfg.seed))
    write_manifest(root, tiny_cfg, tiny_cfg.seed)
    return root
