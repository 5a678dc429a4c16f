"""Point-set, detection and dataset-level evaluation metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median
from typing import TYPE_CHECKING, Iterable

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateShapeError, DomainError, EmptyPointSetError, EvaluationError
from .geometry import Pose, SphereFrame

if TYPE_CHECKING:
    from .config import EvalConfig
    from .dataset import SceneAnnotation


PRIMARY_IOU = 0.5
DIFFICULTIES = ("easy", "medium", "hard")


def _points(a: np.ndarray) -> np.ndarray:
    pts = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyPointSetError("point set is empty")
    return pts


def nearest_distances(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance from every point of ``a`` to ``b`` and from every point of ``b`` to ``a``."""
    pa, pb = _points(a), _points(b)
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return d_ab, d_ba


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of unsquared nearest-neighbour distances."""
    d_ab, d_ba = nearest_distances(a, b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def f_score(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    if not tau > 0:
        raise DomainError("f-score threshold must be positive")
    d_ab, d_ba = nearest_distances(a, b)
    precision = float((d_ab <= tau).mean())
    recall = float((d_ba <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def shape_proportion_error(pred_points: np.ndarray, gt_points: np.ndarray, gt_pose: Pose | None = None) -> float:
    """Mean absolute gap between max-normalized axis extents, measured in the GT frame."""
    pred, gt = _points(pred_points), _points(gt_points)
    if gt_pose is not None:
        r = gt_pose.matrix()
        pred, gt = pred @ r, gt @ r

    def proportions(pts: np.ndarray) -> np.ndarray:
        extent = pts.max(axis=0) - pts.min(axis=0)
        top = float(extent.max())
        if top <= 0.0:
            raise DegenerateShapeError("point set has zero extent")
        return extent / top

    return float(np.abs(proportions(pred) - proportions(gt)).mean())


def sphere_iou(a: SphereFrame, b: SphereFrame) -> float:
    ra, rb = a.radius, b.radius
    d = float(np.linalg.norm(np.asarray(a.center) - np.asarray(b.center)))
    if d >= ra + rb:
        return 0.0
    if d <= abs(ra - rb):
        inter = min(a.volume, b.volume)
    else:
        inter = math.pi * (ra + rb - d) ** 2 * (d * d + 2.0 * d * (ra + rb) - 3.0 * (ra - rb) ** 2) / (12.0 * d)
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union)))


@dataclass(frozen=True)
class Detection:
    scene_id: str
    index: int
    confidence: float
    frame: SphereFrame


def match_scene(
    detections: list[Detection], gts: list[SphereFrame], iou_threshold: float
) -> list[tuple[int, int | None, float]]:
    """Greedy matching in confidence order; returns ``(det, gt or None, iou)`` per detection.

    Each detection takes the unmatched GT with the highest IoU, if it reaches the
    threshold. Output follows the detections' sorted order.
    """
    order = sorted(range(len(detections)), key=lambda k: (-detections[k].confidence, detections[k].index))
    taken: set[int] = set()
    out = []
    for k in order:
        best, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if j in taken:
                continue
            iou = sphere_iou(detections[k].frame, gt)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best is not None:
            taken.add(best)
        out.append((k, best, max(best_iou, 0.0)))
    return out


def average_precision(
    detections: list[Detection], gts: dict[str, list[SphereFrame]], iou_threshold: float = PRIMARY_IOU
) -> float:
    """All-point interpolated AP over every scene's detections."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 0.0
    by_scene: dict[str, list[Detection]] = {}
    for det in detections:
        by_scene.setdefault(det.scene_id, []).append(det)

    hits: list[tuple[float, str, int, bool]] = []
    for scene_id, dets in by_scene.items():
        for k, gt, _ in match_scene(dets, gts.get(scene_id, []), iou_threshold):
            hits.append((dets[k].confidence, scene_id, dets[k].index, gt is not None))
    hits.sort(key=lambda h: (-h[0], h[1], h[2]))
    if not hits:
        return 0.0

    tp = np.cumsum([h[3] for h in hits], dtype=np.float64)
    fp = np.cumsum([not h[3] for h in hits], dtype=np.float64)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# --- dataset evaluation ---------------------------------------------------------


@dataclass(frozen=True)
class ScenePrediction:
    """Post-processed detections for one scene with their reconstructed surface samples."""

    scene_id: str
    detections: list[Detection]
    surfaces: list[np.ndarray]
    seconds: float = 0.0


@dataclass(frozen=True)
class EvalRow:
    scene: str
    gt_id: int
    difficulty: str
    pred_id: int | None
    conf: float | None
    iou: float | None
    chamfer: float
    chamfer_m: float | None
    fscore: float | None
    spe: float | None
    pos_err: float | None


@dataclass
class SceneEval:
    scene_id: str
    rows: list[EvalRow]
    detections: list[Detection]
    gts: list[SphereFrame]
    seconds: float


@dataclass
class EvalReport:
    aggregates: dict
    rows: list[EvalRow] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)

    def to_json(self, config: dict | None = None, run_id: str | None = None) -> dict:
        return {"run_id": run_id, "aggregates": self.aggregates, "config": config or {}}

    def write(self, out_dir: Path, config: dict | None = None, run_id: str | None = None) -> tuple[Path, Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "eval.json"
        json_path.write_text(json.dumps(self.to_json(config, run_id), indent=2), encoding="utf-8")
        csv_path = out_dir / "eval.csv"
        columns = list(EvalRow.__dataclass_fields__)
        with csv_path.open("w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=columns)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: ("" if v is None else v) for k, v in asdict(row).items()})
        return json_path, csv_path


def evaluate_scene(pred: ScenePrediction, annotation: "SceneAnnotation", cfg: "EvalConfig") -> SceneEval:
    if pred.scene_id != annotation.scene_id:
        raise EvaluationError(f"prediction for {pred.scene_id} evaluated against {annotation.scene_id}")
    if len(pred.surfaces) != len(pred.detections):
        raise EvaluationError(f"scene {pred.scene_id}: {len(pred.detections)} detections, {len(pred.surfaces)} surfaces")

    objects = [(k, o) for k, o in enumerate(annotation.objects) if o.visible]
    gts = [o.frame for _, o in objects]
    matched: dict[int, tuple[int, float]] = {}
    for k, gt, iou in match_scene(pred.detections, gts, PRIMARY_IOU):
        if gt is not None:
            matched[gt] = (k, iou)

    rows = []
    for j, (gt_id, obj) in enumerate(objects):
        if j not in matched:
            rows.append(
                EvalRow(pred.scene_id, gt_id, obj.difficulty, None, None, None, cfg.unmatched_chamfer_penalty,
                        None, None, None, None)
            )
            continue
        k, iou = matched[j]
        det = pred.detections[k]
        surface = np.asarray(pred.surfaces[k], dtype=np.float64).reshape(-1, 3)
        gt_points = obj.world_surface()
        pos_err = float(np.linalg.norm(np.asarray(det.frame.center) - obj.position))
        if surface.shape[0] == 0:
            chamfer, chamfer_m, fscore, spe = cfg.unmatched_chamfer_penalty, None, 0.0, None
        else:
            chamfer_m = chamfer_distance(surface, gt_points)
            chamfer = chamfer_m / obj.scale
            fscore = f_score(surface, gt_points, cfg.fscore_tau_ratio * obj.scale)
            try:
                spe = shape_proportion_error(surface, gt_points, obj.pose)
            except DegenerateShapeError:
                spe = None
        rows.append(
            EvalRow(pred.scene_id, gt_id, obj.difficulty, det.index, det.confidence, iou, chamfer, chamfer_m,
                    fscore, spe, pos_err)
        )
    return SceneEval(pred.scene_id, rows, pred.detections, gts, pred.seconds)


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate_rows(rows: list[EvalRow], topk: int) -> dict:
    """Row-level aggregates; recomputable from an ``eval.csv`` dump."""
    matched = [r for r in rows if r.pred_id is not None]
    sq = [r.pos_err**2 for r in matched if r.pos_err is not None]
    ape = float(np.mean(sq)) if sq else None
    best = sorted(r.chamfer for r in matched)[:topk]
    return {
        "gt_objects": len(rows),
        "matched": len(matched),
        "recall": len(matched) / len(rows) if rows else 0.0,
        "ape": ape,
        "position_rmse": math.sqrt(ape) if ape is not None else None,
        "acd": _mean(r.chamfer for r in rows),
        "acd_matched": _mean(r.chamfer for r in matched),
        "acd_m": _mean(r.chamfer_m for r in matched),
        f"cd_top{topk}": float(np.mean(best)) if best else None,
        "spe": _mean(r.spe for r in matched),
        "fscore": _mean(r.fscore for r in matched),
    }


def summarize(scenes: list[SceneEval], cfg: "EvalConfig") -> EvalReport:
    """Fold per-scene results in scene-id order."""
    scenes = sorted(scenes, key=lambda s: s.scene_id)
    rows = [r for s in scenes for r in s.rows]
    detections = [d for s in scenes for d in s.detections]
    gts = {s.scene_id: s.gts for s in scenes}

    aggregates = aggregate_rows(rows, cfg.topk)
    aggregates["ap"] = {f"{t:g}": average_precision(detections, gts, t) for t in cfg.iou_thresholds}
    aggregates["ap50"] = average_precision(detections, gts, PRIMARY_IOU)
    aggregates["by_difficulty"] = {
        level: aggregate_rows([r for r in rows if r.difficulty == level], cfg.topk) for level in DIFFICULTIES
    }
    timings = [s.seconds for s in scenes]
    aggregates["scenes"] = len(scenes)
    aggregates["detections"] = len(detections)
    aggregates["seconds_per_scene_mean"] = float(np.mean(timings)) if timings else None
    aggregates["seconds_per_scene_median"] = float(median(timings)) if timings else None
    aggregates["seconds_per_object"] = sum(timings) / len(detections) if detections else None
    return EvalReport(aggregates=aggregates, rows=rows, timings=timings)


def evaluate_dataset(
    predictions: list[ScenePrediction], annotations: list["SceneAnnotation"], cfg: "EvalConfig"
) -> EvalReport:
    by_id = {a.scene_id: a for a in annotations}
    pred_ids = {p.scene_id for p in predictions}
    if pred_ids != set(by_id):
        missing = sorted(set(by_id) - pred_ids)[:5]
        extra = sorted(pred_ids - set(by_id))[:5]
        raise EvaluationError(f"prediction ids do not match the dataset (missing {missing}, unknown {extra})")
    return summarize([evaluate_scene(p, by_id[p.scene_id], cfg) for p in predictions], cfg)
