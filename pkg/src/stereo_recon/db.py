from __future__ import annotations

import json
import sqlite3
import time
import uuid
from dataclasses import dataclass
from pathlib import Path


SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Run:
    id: str
    kind: str
    status: str
    started_at: int
    finished_at: int | None
    arch_hash: str
    config: str
    checkpoint: str | None
    error: str | None


@dataclass(frozen=True)
class StepRecord:
    run_id: str
    step: int
    ts: int
    losses: dict[str, float]


@dataclass(frozen=True)
class EvalEntry:
    id: int
    run_id: str
    split: str
    ts: int
    aggregates: dict


class RunStore:
    """SQLite ledger of training runs, their per-step losses and evaluations."""

    def __init__(self, path: Path):
        self.path = path

    def connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.path)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys = ON")
        return conn

    def init(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.connect() as conn:
            current = conn.execute("PRAGMA user_version").fetchone()[0]
            if current == 0:
                self._create_v1(conn)
                conn.execute(f"PRAGMA user_version = {SCHEMA_VERSION}")
            elif current != SCHEMA_VERSION:
                raise RuntimeError(f"Unsupported schema version: {current}")

    def _create_v1(self, conn: sqlite3.Connection) -> None:
        conn.executescript(
            """
            CREATE TABLE IF NOT EXISTS runs (
              id TEXT PRIMARY KEY,
              kind TEXT NOT NULL,
              status TEXT NOT NULL,
              started_at INTEGER NOT NULL,
              finished_at INTEGER,
              arch_hash TEXT NOT NULL,
              config TEXT NOT NULL,
              checkpoint TEXT,
              error TEXT
            );

            CREATE TABLE IF NOT EXISTS steps (
              run_id TEXT NOT NULL,
              step INTEGER NOT NULL,
              ts INTEGER NOT NULL,
              losses TEXT NOT NULL,
              PRIMARY KEY(run_id, step),
              FOREIGN KEY(run_id) REFERENCES runs(id) ON DELETE CASCADE
            );

            CREATE TABLE IF NOT EXISTS evals (
              id INTEGER PRIMARY KEY AUTOINCREMENT,
              run_id TEXT NOT NULL,
              split TEXT NOT NULL,
              ts INTEGER NOT NULL,
              aggregates TEXT NOT NULL,
              FOREIGN KEY(run_id) REFERENCES runs(id) ON DELETE CASCADE
            );

            CREATE INDEX IF NOT EXISTS idx_steps_run_step ON steps(run_id, step);
            """
        )

    def start_run(self, kind: str, arch_hash: str, config: dict) -> str:
        run_id = uuid.uuid4().hex[:12]
        with self.connect() as conn:
            conn.execute(
                "INSERT INTO runs(id, kind, status, started_at, arch_hash, config) VALUES (?, ?, ?, ?, ?, ?)",
                (run_id, kind, "running", int(time.time()), arch_hash, json.dumps(config, sort_keys=True)),
            )
            conn.commit()
        return run_id

    def finish_run(self, run_id: str, status: str, checkpoint: Path | None = None, error: str | None = None) -> None:
        with self.connect() as conn:
            conn.execute(
                "UPDATE runs SET status = ?, finished_at = ?, checkpoint = ?, error = ? WHERE id = ?",
                (status, int(time.time()), None if checkpoint is None else str(checkpoint), error, run_id),
            )
            conn.commit()

    def log_step(self, run_id: str, step: int, losses: dict[str, float]) -> None:
        with self.connect() as conn:
            conn.execute(
                "INSERT OR REPLACE INTO steps(run_id, step, ts, losses) VALUES (?, ?, ?, ?)",
                (run_id, int(step), int(time.time()), json.dumps(losses)),
            )
            conn.commit()

    def add_eval(self, run_id: str, split: str, aggregates: dict) -> int:
        with self.connect() as conn:
            cur = conn.execute(
                "INSERT INTO evals(run_id, split, ts, aggregates) VALUES (?, ?, ?, ?)",
                (run_id, split, int(time.time()), json.dumps(aggregates)),
            )
            conn.commit()
            return int(cur.lastrowid)

    def get_runs(self) -> list[Run]:
        with self.connect() as conn:
            rows = conn.execute("SELECT * FROM runs ORDER BY started_at DESC, id").fetchall()
        return [Run(**dict(r)) for r in rows]

    def get_run(self, run_id: str) -> Run | None:
        with self.connect() as conn:
            row = conn.execute("SELECT * FROM runs WHERE id = ?", (run_id,)).fetchone()
        return Run(**dict(row)) if row else None

    def get_steps(self, run_id: str, limit: int = 500) -> list[StepRecord]:
        with self.connect() as conn:
            rows = conn.execute(
                "SELECT run_id, step, ts, losses FROM steps WHERE run_id = ? ORDER BY step DESC LIMIT ?",
                (run_id, limit),
            ).fetchall()
        return [
            StepRecord(run_id=r["run_id"], step=int(r["step"]), ts=int(r["ts"]), losses=json.loads(r["losses"]))
            for r in rows
        ]

    def get_latest_steps(self) -> dict[str, StepRecord]:
        with self.connect() as conn:
            rows = conn.execute(
                """
                SELECT s.run_id, s.step, s.ts, s.losses
                FROM steps s
                JOIN (
                  SELECT run_id, MAX(step) AS max_step
                  FROM steps
                  GROUP BY run_id
                ) last
                ON last.run_id = s.run_id AND last.max_step = s.step
                """
            ).fetchall()
        return {
            r["run_id"]: StepRecord(
                run_id=r["run_id"], step=int(r["step"]), ts=int(r["ts"]), losses=json.loads(r["losses"])
            )
            for r in rows
        }

    def get_evals(self, run_id: str) -> list[EvalEntry]:
        with self.connect() as conn:
            rows = conn.execute(
                "SELECT id, run_id, split, ts, aggregates FROM evals WHERE run_id = ? ORDER BY ts DESC, id DESC",
                (run_id,),
            ).fetchall()
        return [
            EvalEntry(
                id=int(r["id"]), run_id=r["run_id"], split=r["split"], ts=int(r["ts"]),
                aggregates=json.loads(r["aggregates"]),
            )
            for r in rows
        ]
