from __future__ import annotations

from datetime import datetime
from pathlib import Path

from textual.app import App, ComposeResult
from textual.containers import Horizontal
from textual.widgets import DataTable, Footer, Header, Static

from .db import RunStore


LOSS_COLUMNS = ("total", "recon", "klreg", "position", "scale", "shape", "confidence")


def _fmt_ts(ts: int | None) -> str:
    if not ts:
        return ""
    return datetime.fromtimestamp(ts).strftime("%Y-%m-%d %H:%M:%S")


def _fmt_loss(value: float | None) -> str:
    if value is None:
        return ""
    return f"{value:.4f}"


class RunBrowserApp(App):
    BINDINGS = [
        ("q", "quit", "Quit"),
        ("r", "refresh", "Refresh"),
    ]

    def __init__(self, db_path: Path):
        super().__init__()
        self.store = RunStore(db_path)
        self.runs_table = DataTable(id="runs")
        self.steps_table = DataTable(id="steps")
        self.status = Static(id="status")

    def compose(self) -> ComposeResult:
        yield Header()
        yield self.status
        with Horizontal():
            yield self.runs_table
            yield self.steps_table
        yield Footer()

    def on_mount(self) -> None:
        self.store.init()

        self.runs_table.add_columns("Run", "Kind", "Status", "Started", "Last step", "Loss")
        self.runs_table.cursor_type = "row"
        self.runs_table.zebra_stripes = True

        self.steps_table.add_columns("Step", *(c.capitalize() for c in LOSS_COLUMNS))
        self.steps_table.cursor_type = "row"
        self.steps_table.zebra_stripes = True

        self.action_refresh()

    def action_refresh(self) -> None:
        runs = self.store.get_runs()
        latest = self.store.get_latest_steps()

        self.runs_table.clear()
        for run in runs:
            s = latest.get(run.id)
            self.runs_table.add_row(
                run.id,
                run.kind,
                run.status,
                _fmt_ts(run.started_at),
                "" if not s else str(s.step),
                "" if not s else _fmt_loss(s.losses.get("total")),
                key=run.id,
            )

        self.status.update(f"Runs: {len(runs)}   (press r to refresh, q to quit)")

        if runs:
            self.runs_table.move_cursor(row=0)
            self._load_steps(runs[0].id)

    def on_data_table_row_highlighted(self, event: DataTable.RowHighlighted) -> None:
        if event.data_table.id != "runs" or event.row_key.value is None:
            return
        self._load_steps(event.row_key.value)

    def _load_steps(self, run_id: str) -> None:
        self.steps_table.clear()
        for s in self.store.get_steps(run_id, limit=200):
            self.steps_table.add_row(str(s.step), *(_fmt_loss(s.losses.get(c)) for c in LOSS_COLUMNS))
