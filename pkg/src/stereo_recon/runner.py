from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass
from pathlib import Path

from .config import EvalConfig, RunConfig
from .dataset import SceneAnnotation, generate_scene, scene_id_for, write_manifest, write_scene
from .errors import EvaluationError
from .metrics import EvalReport, SceneEval, ScenePrediction, evaluate_scene, summarize


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GenerationResult:
    scene_id: str
    ok: bool
    error: str | None


def generate_one(cfg: RunConfig, root: Path, index: int, master_seed: int) -> GenerationResult:
    scene_id = scene_id_for(index)
    try:
        write_scene(root, generate_scene(cfg, index, master_seed))
        return GenerationResult(scene_id=scene_id, ok=True, error=None)
    except Exception as e:
        logger.error("scene %s failed: %s: %s", scene_id, type(e).__name__, e)
        return GenerationResult(scene_id=scene_id, ok=False, error=f"{type(e).__name__}: {e}")


async def generate_scenes(
    cfg: RunConfig, root: Path, indices: range, master_seed: int, concurrency: int = 4
) -> list[GenerationResult]:
    """Render and write scenes with at most ``concurrency`` in flight."""
    sem = asyncio.Semaphore(concurrency)

    async def _one(index: int) -> GenerationResult:
        async with sem:
            return await asyncio.to_thread(generate_one, cfg, root, index, master_seed)

    tasks = [_one(i) for i in indices]
    return await asyncio.gather(*tasks)


async def evaluate_scenes(
    predictions: list[ScenePrediction],
    annotations: dict[str, SceneAnnotation],
    cfg: EvalConfig,
    concurrency: int = 4,
) -> EvalReport:
    pred_ids = {p.scene_id for p in predictions}
    if pred_ids != set(annotations):
        raise EvaluationError(
            f"{len(pred_ids - set(annotations))} predicted scenes unknown, "
            f"{len(set(annotations) - pred_ids)} dataset scenes without predictions"
        )
    sem = asyncio.Semaphore(concurrency)

    async def _one(pred: ScenePrediction) -> SceneEval:
        async with sem:
            return await asyncio.to_thread(evaluate_scene, pred, annotations[pred.scene_id], cfg)

    scenes = await asyncio.gather(*[_one(p) for p in predictions])
    return summarize(list(scenes), cfg)


async def generate_dataset(
    cfg: RunConfig, out: Path, concurrency: int | None = None
) -> dict[str, list[GenerationResult]]:
    """Write ``out/train`` and ``out/val``; val indices continue after train."""
    concurrency = concurrency or cfg.data.workers
    splits = {
        "train": range(0, cfg.data.train_scenes),
        "val": range(cfg.data.train_scenes, cfg.data.train_scenes + cfg.data.val_scenes),
    }
    results: dict[str, list[GenerationResult]] = {}
    for split, indices in splits.items():
        root = out / split
        (root / "scenes").mkdir(parents=True, exist_ok=True)
        results[split] = await generate_scenes(cfg, root, indices, cfg.seed, concurrency)
        write_manifest(root, cfg, cfg.seed)
        failed = sum(1 for r in results[split] if not r.ok)
        logger.info("%s: %d scenes written, %d failed", split, len(results[split]) - failed, failed)
    return results
