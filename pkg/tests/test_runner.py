from __future__ import annotations

from pathlib import Path

import pytest

from stereo_recon.config import RunConfig
from stereo_recon.dataset import SceneDataset
from stereo_recon.errors import EvaluationError
from stereo_recon.metrics import ScenePrediction
from stereo_recon.runner import evaluate_scenes, generate_dataset, generate_scenes


@pytest.mark.asyncio
async def test_generate_dataset_writes_both_splits(tmp_path: Path, tiny_cfg: RunConfig) -> None:
    cfg = tiny_cfg.model_copy(update={"data": tiny_cfg.data.model_copy(update={"train_scenes": 3, "val_scenes": 2})})
    results = await generate_dataset(cfg, tmp_path, concurrency=2)
    assert [r.scene_id for r in results["train"]] == ["000000", "000001", "000002"]
    assert [r.scene_id for r in results["val"]] == ["000003", "000004"]
    assert all(r.ok for rs in results.values() for r in rs)

    train = SceneDataset.load(tmp_path / "train")
    val = SceneDataset.load(tmp_path / "val")
    assert train.scene_ids() == ["000000", "000001", "000002"]
    assert val.scene_ids() == ["000003", "000004"]
    assert train.manifest["num_scenes"] == 3


@pytest.mark.asyncio
async def test_generation_does_not_depend_on_concurrency(tmp_path: Path, tiny_cfg: RunConfig) -> None:
    for name, concurrency in (("a", 1), ("b", 3)):
        results = await generate_scenes(tiny_cfg, tmp_path / name, range(3), tiny_cfg.seed, concurrency)
        assert all(r.ok for r in results)
    for scene_id in ("000000", "000001", "000002"):
        a = (tmp_path / "a" / "scenes" / scene_id / "annotation.json").read_bytes()
        b = (tmp_path / "b" / "scenes" / scene_id / "annotation.json").read_bytes()
        assert a == b


@pytest.mark.asyncio
async def test_evaluate_scenes_matches_annotations(tiny_dataset: Path, tiny_cfg: RunConfig) -> None:
    ds = SceneDataset.load(tiny_dataset)
    annotations = {sid: ds.load_annotation(sid) for sid in ds.scene_ids()}
    empty = [ScenePrediction(scene_id=sid, detections=[], surfaces=[]) for sid in annotations]
    report = await evaluate_scenes(empty, annotations, tiny_cfg.eval, concurrency=2)
    assert report.aggregates["scenes"] == 3
    assert report.aggregates["ap50"] == 0.0
    visible = sum(len(a.visible_objects()) for a in annotations.values())
    assert report.aggregates["gt_objects"] == visible

    with pytest.raises(EvaluationError):
        await evaluate_scenes(empty[:2], annotations, tiny_cfg.eval)
