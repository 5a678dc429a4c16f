from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from stereo_recon.config import EvalConfig
from stereo_recon.dataset import ObjectAnnotation, SceneAnnotation
from stereo_recon.errors import DomainError, EmptyPointSetError, EvaluationError
from stereo_recon.geometry import CameraRig, Pose, SphereFrame
from stereo_recon.metrics import (
    Detection,
    ScenePrediction,
    aggregate_rows,
    average_precision,
    chamfer_distance,
    evaluate_dataset,
    evaluate_scene,
    f_score,
    nearest_distances,
    shape_proportion_error,
    sphere_iou,
    summarize,
)
from stereo_recon.shapes import PrimitiveShape, sample_surface_points


RIG = CameraRig(fx=56.0, fy=56.0, cx=32.0, cy=24.0, baseline=0.13, width=64, height=48)


def _object(position: tuple[float, float, float], scale: float, kind: str = "box",
            params: tuple[float, ...] = (1.0, 0.6, 0.4), visible: bool = True, seed: int = 0) -> ObjectAnnotation:
    shape = PrimitiveShape.create(kind, params)
    return ObjectAnnotation(
        kind=kind,
        params=shape.params,
        position=np.asarray(position, dtype=np.float64),
        scale=scale,
        rotation_wxyz=(1.0, 0.0, 0.0, 0.0),
        shape_frame=SphereFrame(center=(0.0, 0.0, 0.0), radius=1.0),
        surface_points=sample_surface_points(shape, 256, seed=seed),
        occ_queries=np.zeros((4, 3)),
        occ_labels=np.zeros(4, dtype=np.int64),
        mask_id=1,
        visible=visible,
        difficulty="medium",
    )


def _scene(scene_id: str, objects: list[ObjectAnnotation]) -> SceneAnnotation:
    return SceneAnnotation(scene_id=scene_id, index=int(scene_id), seed=0, attempt=0, rig=RIG, objects=objects)


def _det(scene_id: str, index: int, confidence: float, center: tuple[float, float, float], radius: float) -> Detection:
    return Detection(scene_id, index, confidence, SphereFrame(center=center, radius=radius))


def _perfect(annotation: SceneAnnotation) -> ScenePrediction:
    visible = annotation.visible_objects()
    return ScenePrediction(
        scene_id=annotation.scene_id,
        detections=[_det(annotation.scene_id, k, 0.9, o.frame.center, o.scale) for k, o in enumerate(visible)],
        surfaces=[o.world_surface() for o in visible],
        seconds=0.25,
    )


def test_chamfer_of_single_points() -> None:
    assert chamfer_distance(np.array([[0.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]])) == pytest.approx(1.0)
    pts = np.random.default_rng(0).random((50, 3))
    assert chamfer_distance(pts, pts) == 0.0
    with pytest.raises(EmptyPointSetError):
        chamfer_distance(np.zeros((0, 3)), pts)


def test_nearest_distances_match_brute_force() -> None:
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(150, 3))
    full = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    d_ab, d_ba = nearest_distances(a, b)
    np.testing.assert_allclose(d_ab, full.min(axis=1))
    np.testing.assert_allclose(d_ba, full.min(axis=0))
    expected = 0.5 * (full.min(axis=1).mean() + full.min(axis=0).mean())
    assert chamfer_distance(a, b) == pytest.approx(expected)


def test_f_score_hand_case() -> None:
    a = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.05, 0.0]])
    # precision 1/2, recall 1
    assert f_score(a, b, tau=0.1) == pytest.approx(2 * 0.5 * 1.0 / 1.5)
    assert f_score(a, b + 10.0, tau=0.1) == 0.0
    with pytest.raises(DomainError):
        f_score(a, b, tau=0.0)


def test_shape_proportion_error() -> None:
    unit = np.array(np.meshgrid([0.0, 1.0], [0.0, 1.0], [0.0, 1.0])).reshape(3, -1).T
    stretched = unit * np.array([2.0, 1.0, 1.0])
    assert shape_proportion_error(stretched, unit) == pytest.approx(1.0 / 3.0)
    assert shape_proportion_error(unit * 3.0 + 1.0, unit) == pytest.approx(0.0)

    # Extents are taken in the GT frame, so a shared rotation changes nothing.
    pose = Pose.from_rotation(Rotation.from_euler("z", 90, degrees=True))
    r = pose.matrix()
    assert shape_proportion_error(stretched @ r.T, unit @ r.T, pose) == pytest.approx(1.0 / 3.0)


def test_sphere_iou() -> None:
    a = SphereFrame(center=(0.0, 0.0, 0.0), radius=1.0)
    assert sphere_iou(a, SphereFrame(center=(1.0, 0.0, 0.0), radius=1.0)) == pytest.approx(5.0 / 27.0)
    assert sphere_iou(a, SphereFrame(center=(3.0, 0.0, 0.0), radius=1.0)) == 0.0
    assert sphere_iou(a, a) == pytest.approx(1.0)
    assert sphere_iou(a, SphereFrame(center=(0.0, 0.0, 0.0), radius=0.5)) == pytest.approx(1.0 / 8.0)


def test_sphere_iou_against_monte_carlo() -> None:
    rng = np.random.default_rng(7)
    a = SphereFrame(center=(0.0, 0.0, 0.0), radius=1.0)
    b = SphereFrame(center=(0.7, 0.3, -0.2), radius=0.8)
    points = rng.uniform(-2.0, 2.0, size=(400_000, 3))
    in_a = np.linalg.norm(points - a.center, axis=1) <= a.radius
    in_b = np.linalg.norm(points - np.asarray(b.center), axis=1) <= b.radius
    estimate = np.sum(in_a & in_b) / np.sum(in_a | in_b)
    assert sphere_iou(a, b) == pytest.approx(estimate, abs=0.01)


def test_sphere_iou_shrinks_with_distance() -> None:
    a = SphereFrame(center=(0.0, 0.0, 0.0), radius=0.6)
    values = [sphere_iou(a, SphereFrame(center=(d, 0.0, 0.0), radius=0.4)) for d in np.linspace(0.0, 1.2, 49)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(later <= earlier + 1e-12 for earlier, later in zip(values, values[1:]))
    assert values[-1] == 0.0


def test_average_precision_cases() -> None:
    gts = {"000000": [SphereFrame((0.0, 0.0, 1.0), 0.1), SphereFrame((0.5, 0.0, 1.0), 0.1)]}
    hits = [_det("000000", 0, 0.9, (0.0, 0.0, 1.0), 0.1), _det("000000", 1, 0.8, (0.5, 0.0, 1.0), 0.1)]
    assert average_precision(hits, gts) == pytest.approx(1.0)

    misses = [_det("000000", 0, 0.9, (3.0, 0.0, 1.0), 0.1)]
    assert average_precision(misses, gts) == 0.0
    assert average_precision([], gts) == 0.0
    assert average_precision(hits, {"000000": []}) == 0.0

    mixed = [hits[0], _det("000000", 2, 0.8, (3.0, 0.0, 1.0), 0.1), _det("000000", 1, 0.7, (0.5, 0.0, 1.0), 0.1)]
    assert average_precision(mixed, gts) == pytest.approx(0.5 + 0.5 * 2.0 / 3.0)


def test_average_precision_depends_only_on_confidence_rank() -> None:
    rng = np.random.default_rng(8)
    gts = {"000000": [SphereFrame((0.1 * k, 0.0, 1.0), 0.04) for k in range(6)]}
    dets = []
    for k in range(10):
        center = (0.1 * (k % 6), 0.0, 1.0) if k % 3 else (0.1 * (k % 6), 0.5, 1.0)
        dets.append(_det("000000", k, float(rng.uniform(0.05, 0.95)), center, 0.04))
    base = average_precision(dets, gts)
    assert 0.0 < base < 1.0
    for transform in (lambda c: c**3, lambda c: 1.0 / (1.0 + math.exp(-8.0 * c)), lambda c: 0.5 * c + 0.1):
        moved = [_det(d.scene_id, d.index, transform(d.confidence), d.frame.center, d.frame.radius) for d in dets]
        assert average_precision(moved, gts) == pytest.approx(base)


def test_duplicate_detections_count_once() -> None:
    gts = {"000000": [SphereFrame((0.0, 0.0, 1.0), 0.1)]}
    dets = [_det("000000", 0, 0.9, (0.0, 0.0, 1.0), 0.1), _det("000000", 1, 0.8, (0.0, 0.0, 1.0), 0.1)]
    assert average_precision(dets, gts) == pytest.approx(1.0)
    assert average_precision(list(reversed(dets)), gts) == pytest.approx(1.0)


def test_perfect_predictions_score_perfectly() -> None:
    annotation = _scene("000003", [_object((0.0, 0.0, 1.0), 0.15), _object((0.4, 0.1, 1.3), 0.2, seed=1)])
    report = evaluate_dataset([_perfect(annotation)], [annotation], EvalConfig())
    agg = report.aggregates
    assert agg["ap50"] == pytest.approx(1.0)
    assert agg["ap"]["0.25"] == pytest.approx(1.0) and agg["ap"]["0.75"] == pytest.approx(1.0)
    assert agg["ape"] == pytest.approx(0.0)
    assert agg["acd"] == pytest.approx(0.0)
    assert agg["spe"] == pytest.approx(0.0, abs=1e-12)
    assert agg["fscore"] == pytest.approx(1.0)
    assert agg["recall"] == 1.0 and agg["matched"] == 2
    assert agg["by_difficulty"]["medium"]["matched"] == 2
    assert agg["by_difficulty"]["easy"]["gt_objects"] == 0


def test_empty_predictions_use_the_penalty() -> None:
    annotation = _scene("000001", [_object((0.0, 0.0, 1.0), 0.15)])
    empty = ScenePrediction(scene_id="000001", detections=[], surfaces=[])
    agg = evaluate_dataset([empty], [annotation], EvalConfig()).aggregates
    assert agg["ap50"] == 0.0
    assert agg["ape"] is None
    assert agg["acd"] == pytest.approx(2.0)
    assert agg["recall"] == 0.0


def test_invisible_objects_are_not_scored() -> None:
    annotation = _scene("000002", [_object((0.0, 0.0, 1.0), 0.15), _object((0.5, 0.0, 1.5), 0.1, visible=False)])
    result = evaluate_scene(_perfect(annotation), annotation, EvalConfig())
    assert [r.gt_id for r in result.rows] == [0]
    assert len(result.gts) == 1


def test_chamfer_is_normalized_by_gt_scale() -> None:
    obj = _object((0.0, 0.0, 1.0), 0.5)
    annotation = _scene("000004", [obj])
    shifted = obj.world_surface() + np.array([0.0, 0.0, 0.01])
    pred = ScenePrediction("000004", [_det("000004", 0, 0.9, obj.frame.center, 0.5)], [shifted])
    row = evaluate_scene(pred, annotation, EvalConfig()).rows[0]
    assert row.chamfer_m is not None
    assert row.chamfer == pytest.approx(row.chamfer_m / 0.5)


def test_aggregates_recompute_from_rows(tmp_path: Path) -> None:
    scenes = [_scene(f"{i:06d}", [_object((0.1 * i, 0.0, 1.0 + 0.1 * i), 0.1 + 0.02 * i, seed=i)]) for i in range(3)]
    preds = [_perfect(scenes[0]), ScenePrediction("000001", [], []), _perfect(scenes[2])]
    cfg = EvalConfig(topk=1)
    report = evaluate_dataset(preds, scenes, cfg)
    rows_only = aggregate_rows(report.rows, cfg.topk)
    for key, value in rows_only.items():
        assert report.aggregates[key] == value
    assert report.aggregates["scenes"] == 3
    assert report.aggregates["seconds_per_scene_median"] == pytest.approx(0.25)

    json_path, csv_path = report.write(tmp_path, config={"seed": 0}, run_id="abc")
    payload = json.loads(json_path.read_text(encoding="utf-8"))
    assert payload["run_id"] == "abc" and payload["config"] == {"seed": 0}
    with csv_path.open(encoding="utf-8") as f:
        table = list(csv.DictReader(f))
    assert [r["scene"] for r in table] == ["000000", "000001", "000002"]
    chamfers = [float(r["chamfer"]) for r in table]
    assert math.isclose(sum(chamfers) / 3, payload["aggregates"]["acd"])
    assert table[1]["pred_id"] == ""


def test_summarize_orders_scenes() -> None:
    a = _scene("000005", [_object((0.0, 0.0, 1.0), 0.1)])
    b = _scene("000002", [_object((0.0, 0.0, 1.2), 0.1)])
    cfg = EvalConfig()
    report = summarize([evaluate_scene(_perfect(a), a, cfg), evaluate_scene(_perfect(b), b, cfg)], cfg)
    assert [r.scene for r in report.rows] == ["000002", "000005"]


def test_evaluation_rejects_mismatched_ids() -> None:
    annotation = _scene("000001", [_object((0.0, 0.0, 1.0), 0.1)])
    with pytest.raises(EvaluationError):
        evaluate_dataset([ScenePrediction("000009", [], [])], [annotation], EvalConfig())
    with pytest.raises(EvaluationError):
        evaluate_scene(ScenePrediction("000009", [], []), annotation, EvalConfig())
