from __future__ import annotations

import asyncio
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Iterator, Optional

import typer
from rich.table import Table

from .config import load_config
from .db import RunStore
from .errors import (
    EXIT_NAN,
    EXIT_VALIDATION,
    ConfigError,
    ConfigMismatchError,
    DatasetError,
    EvaluationError,
    NaNLossError,
)
from .logs import console, setup_logging
from .runner import generate_dataset
from .settings import Settings
from .train import (
    interpolate_shapes,
    parse_object_ref,
    precompute_gt_latents,
    reconstruct_scene,
    run_evaluation,
    train_detector,
    train_vae,
)
from .tui import RunBrowserApp


app = typer.Typer(add_completion=False, help="Stereo multi-object 3D reconstruction: data, training and evaluation.")

ConfigOption = Annotated[Optional[Path], typer.Option("--config", help="TOML run configuration")]
DbOption = Annotated[Optional[Path], typer.Option(help="Path to SQLite run ledger")]
DataOption = Annotated[Optional[Path], typer.Option(help="Dataset directory (defaults to data.root)")]


def _store_from_option(db: Path | None) -> RunStore:
    settings = Settings()
    store = RunStore(db or settings.default_db_path())
    store.init()
    return store


@contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except NaNLossError as e:
        console.print(f"[red]Aborted: {e}")
        raise typer.Exit(code=EXIT_NAN) from e
    except (ConfigError, ConfigMismatchError, DatasetError, EvaluationError) as e:
        console.print(f"[red]{type(e).__name__}: {e}")
        raise typer.Exit(code=EXIT_VALIDATION) from e


@app.callback()
def main(
    verbose: Annotated[bool, typer.Option("--verbose", "-v", help="Debug logging")] = False,
) -> None:
    setup_logging(verbose)


@app.command("gen-data")
def gen_data(
    out: Annotated[Path, typer.Option(help="Output directory; train/ and val/ are created inside")],
    config: ConfigOption = None,
    workers: Annotated[Optional[int], typer.Option(help="Scenes rendered concurrently")] = None,
) -> None:
    """Generate the procedural stereo dataset."""
    with _exit_codes():
        cfg = load_config(config)
        results = asyncio.run(generate_dataset(cfg, out, concurrency=workers))
    for split, res in results.items():
        ok = sum(1 for r in res if r.ok)
        console.print(f"{split}: OK {ok}/{len(res)} -> {out / split}")
        for r in res:
            if not r.ok:
                console.print(f"[yellow]  {r.scene_id}: {r.error}")


@app.command("train-vae")
def train_vae_cmd(
    config: ConfigOption = None,
    data: DataOption = None,
    out: Annotated[Optional[Path], typer.Option(help="Checkpoint path")] = None,
    db: DbOption = None,
) -> None:
    """Train the pose-aware shape VAE."""
    with _exit_codes():
        ckpt = train_vae(load_config(config), data_root=data, out=out, store=_store_from_option(db))
    console.print(f"Wrote: {ckpt}")


@app.command("encode-gt")
def encode_gt(
    vae: Annotated[Path, typer.Option(help="VAE checkpoint")],
    data: Annotated[Path, typer.Option(help="Dataset root, or a directory holding train/ and val/")],
    force: Annotated[bool, typer.Option(help="Overwrite latents written by another VAE")] = False,
    device: Annotated[str, typer.Option(help="Torch device for encoding")] = "cpu",
) -> None:
    """Store GT latent distributions beside every annotation."""
    roots = [data] if (data / "manifest.json").exists() else [data / s for s in ("train", "val") if (data / s).is_dir()]
    with _exit_codes():
        if not roots:
            raise DatasetError(f"no dataset under {data}")
        for root in roots:
            count = precompute_gt_latents(vae, root, force=force, device=device)
            console.print(f"{root}: encoded {count} objects")


@app.command("train-detector")
def train_detector_cmd(
    vae: Annotated[Path, typer.Option(help="Frozen VAE checkpoint")],
    config: ConfigOption = None,
    data: DataOption = None,
    out: Annotated[Optional[Path], typer.Option(help="Checkpoint path")] = None,
    force: Annotated[bool, typer.Option(help="Accept a VAE whose architecture hash differs")] = False,
    db: DbOption = None,
) -> None:
    """Train the stereo detector against a frozen VAE."""
    with _exit_codes():
        ckpt = train_detector(load_config(config), vae, data_root=data, out=out, store=_store_from_option(db), force=force)
    console.print(f"Wrote: {ckpt}")


@app.command("eval")
def eval_cmd(
    ckpt: Annotated[Path, typer.Option(help="Detector checkpoint")],
    config: ConfigOption = None,
    split: Annotated[str, typer.Option(help="Dataset split")] = "val",
    data: DataOption = None,
    out: Annotated[Optional[Path], typer.Option(help="Report directory")] = None,
    force: Annotated[bool, typer.Option(help="Accept an architecture hash mismatch")] = False,
    db: DbOption = None,
) -> None:
    """Evaluate a detector checkpoint and write eval.json / eval.csv."""
    with _exit_codes():
        report, out_dir = run_evaluation(
            load_config(config), ckpt, split=split, data_root=data, out_dir=out, store=_store_from_option(db), force=force
        )

    agg = report.aggregates
    table = Table(title=f"Evaluation ({split})")
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for name, value in agg["ap"].items():
        table.add_row(f"AP@{name}", f"{value:.4f}")
    for key in ("ape", "position_rmse", "acd", "acd_matched", "spe", "fscore", "recall", "seconds_per_scene_mean"):
        value = agg.get(key)
        table.add_row(key, "" if value is None else f"{value:.4f}")
    console.print(table)
    console.print(f"Wrote: {out_dir}")


@app.command()
def reconstruct(
    ckpt: Annotated[Path, typer.Option(help="Detector checkpoint")],
    scene: Annotated[str, typer.Option(help="Scene id, e.g. 002001")],
    out: Annotated[Path, typer.Option(help="Output directory")],
    split: Annotated[str, typer.Option(help="Dataset split")] = "val",
    data: DataOption = None,
    config: ConfigOption = None,
    stl: Annotated[bool, typer.Option(help="Also write binary STL")] = False,
    force: Annotated[bool, typer.Option(help="Accept an architecture hash mismatch")] = False,
) -> None:
    """Reconstruct every detected object of one scene as meshes in the camera frame."""
    with _exit_codes():
        cfg = load_config(config) if config else None
        sidecar = reconstruct_scene(ckpt, scene, out, split=split, data_root=data, cfg=cfg, force=force, stl=stl)
    console.print(f"Wrote: {sidecar}")


@app.command()
def interpolate(
    vae: Annotated[Path, typer.Option(help="VAE checkpoint")],
    data: Annotated[Path, typer.Option(help="Dataset root")],
    a: Annotated[str, typer.Option("--a", help="First object as SCENE:INDEX")],
    b: Annotated[str, typer.Option("--b", help="Second object as SCENE:INDEX")],
    out: Annotated[Path, typer.Option(help="Output directory")],
    steps: Annotated[int, typer.Option(help="Number of interpolation points")] = 5,
    resolution: Annotated[int, typer.Option(help="Marching-cubes grid size")] = 48,
) -> None:
    """Export meshes along the latent path between two annotated objects."""
    with _exit_codes():
        paths = interpolate_shapes(vae, data, parse_object_ref(a), parse_object_ref(b), out, steps, resolution)
    console.print(f"Wrote {len(paths)} meshes to {out}")


@app.command()
def runs(db: DbOption = None) -> None:
    """List recorded runs with their latest losses."""
    store = _store_from_option(db)
    latest = store.get_latest_steps()

    table = Table(title="Runs")
    table.add_column("Run")
    table.add_column("Kind")
    table.add_column("Status")
    table.add_column("Step", justify="right")
    table.add_column("Loss", justify="right")
    table.add_column("Checkpoint")
    table.add_column("Error")
    for r in store.get_runs():
        s = latest.get(r.id)
        table.add_row(
            r.id,
            r.kind,
            r.status,
            "" if not s else str(s.step),
            "" if not s or s.losses.get("total") is None else f"{s.losses['total']:.4f}",
            r.checkpoint or "",
            r.error or "",
        )
    console.print(table)


@app.command()
def tui(db: DbOption = None) -> None:
    """Open the Textual TUI to browse runs and loss history."""
    store = _store_from_option(db)
    RunBrowserApp(store.path).run()
