from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from platformdirs import user_data_dir

from .errors import ConfigError


@dataclass(frozen=True)
class Settings:
    app_name: str = "stereo-recon"

    def data_dir(self) -> Path:
        base = Path(user_data_dir(self.app_name))
        base.mkdir(parents=True, exist_ok=True)
        return base

    def default_db_path(self) -> Path:
        return self.data_dir() / "runs.sqlite3"

    def default_run_dir(self) -> Path:
        return self.data_dir() / "runs"

    def seed_override(self) -> int | None:
        raw = os.getenv("RUN_SEED", "").strip()
        if not raw:
            return None
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"RUN_SEED must be an integer, got {raw!r}") from e

    def device_override(self) -> str | None:
        raw = os.getenv("RUN_DEVICE", "").strip()
        return raw or None
