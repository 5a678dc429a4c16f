"""Seeding, checkpoints, the two training stages, GT latents and inference commands."""

from __future__ import annotations

import asyncio
import hashlib
import logging
import os
import random
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from .config import OptimConfig, RunConfig, config_from_dict
from .dataset import (
    DetectionDataset,
    RotatedShapeStream,
    SceneAnnotation,
    SceneDataset,
    collate_scenes,
    collect_shapes,
    image_to_tensor,
)
from .db import RunStore
from .detector import (
    Detector,
    Reconstruction,
    export_reconstructions,
    postprocess_predictions,
    reconstruct_objects,
)
from .errors import ConfigMismatchError, DatasetError, FrozenModelError, NaNLossError, SceneLoadError
from .matching import detection_loss, match_batch
from .metrics import Detection, EvalReport, ScenePrediction
from .runner import evaluate_scenes
from .vae import ShapeVAE, extract_surfaces, interpolate_latents, klreg_loss, recon_loss


logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
RECON_QUERIES = 512


# --- reproducibility -----------------------------------------------------------


def seed_everything(seed: int, strict: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if strict:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def build_optimizer(
    params: list[nn.Parameter], cfg: OptimConfig, total_steps: int
) -> tuple[torch.optim.AdamW, torch.optim.lr_scheduler.CosineAnnealingLR]:
    optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        optimizer, T_max=max(1, total_steps), eta_min=cfg.lr * cfg.min_lr_ratio
    )
    return optimizer, scheduler


def model_fingerprint(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: Path, payload: dict) -> Path:
    """Atomic ``torch.save`` of a checkpoint dictionary."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{uuid.uuid4().hex}.tmp")
    torch.save({"schema_version": CHECKPOINT_SCHEMA, **payload}, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path, kind: str) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise ConfigMismatchError(f"checkpoint not found: {path}") from e
    if ckpt.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ConfigMismatchError(f"{path}: checkpoint schema {ckpt.get('schema_version')}, expected {CHECKPOINT_SCHEMA}")
    if ckpt.get("kind") != kind:
        raise ConfigMismatchError(f"{path}: expected a {kind} checkpoint, found {ckpt.get('kind')}")
    return ckpt


def _check_hash(what: str, stored: str, expected: str, force: bool) -> None:
    if stored == expected:
        return
    if not force:
        raise ConfigMismatchError(f"{what} architecture hash {stored[:12]} does not match the config ({expected[:12]})")
    logger.warning("%s architecture hash mismatch overridden", what)


def load_vae(path: Path, cfg: RunConfig | None = None, force: bool = False) -> tuple[ShapeVAE, RunConfig]:
    """VAE built from the checkpoint's own config; ``cfg`` is only compared."""
    ckpt = load_checkpoint(path, "vae")
    stored = config_from_dict(ckpt["config"])
    if cfg is not None:
        _check_hash("VAE", ckpt["arch_hash"], cfg.vae_hash(), force)
    vae = ShapeVAE(stored.vae)
    vae.load_state_dict(ckpt["model"])
    return vae, stored


def load_detector(
    path: Path, cfg: RunConfig | None = None, force: bool = False
) -> tuple[Detector, ShapeVAE, RunConfig]:
    ckpt = load_checkpoint(path, "detector")
    stored = config_from_dict(ckpt["config"])
    if cfg is not None:
        _check_hash("detector", ckpt["arch_hash"], cfg.detector_hash(), force)
    detector = Detector(stored)
    detector.load_state_dict(ckpt["model"])
    vae = ShapeVAE(config_from_dict(ckpt["vae"]["config"]).vae)
    vae.load_state_dict(ckpt["vae"]["model"])
    return detector, vae, stored


def _freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# --- ledger helpers ----------------------------------------------------------------


def _start_run(store: RunStore | None, kind: str, cfg: RunConfig, arch_hash: str) -> str | None:
    if store is None:
        return None
    return store.start_run(kind, arch_hash, cfg.model_dump(mode="json"))


def _log_step(store: RunStore | None, run_id: str | None, step: int, losses: dict[str, float]) -> None:
    if store is not None and run_id is not None:
        store.log_step(run_id, step, losses)


def _finish(store: RunStore | None, run_id: str | None, status: str, ckpt: Path | None, error: str | None = None) -> None:
    if store is not None and run_id is not None:
        store.finish_run(run_id, status, ckpt, error)


# --- stage 1: shape VAE ----------------------------------------------------------------


def train_vae(
    cfg: RunConfig,
    data_root: Path | None = None,
    out: Path | None = None,
    store: RunStore | None = None,
) -> Path:
    """Train the shape VAE on randomly rotated copies of the dataset's primitives."""
    seed_everything(cfg.seed, cfg.strict_deterministic)
    device = resolve_device(cfg.device)
    data_root = data_root or cfg.data.root
    tc = cfg.train_vae
    out = out or cfg.resolved_run_dir() / "vae.pt"

    shapes = collect_shapes(SceneDataset.load(data_root / "train"), limit=tc.max_shapes)
    logger.info("training VAE on %d primitives, %d steps, device %s", len(shapes), tc.steps, device)
    stream = RotatedShapeStream(
        shapes,
        cfg.vae.n_surface,
        tc.train_queries,
        cfg.data.near_surface_sigma,
        cfg.seed,
        cfg.vae.voxel_space,
    )
    loader = DataLoader(stream, batch_size=tc.batch_size, num_workers=tc.workers)

    model = ShapeVAE(cfg.vae).to(device)
    optimizer, scheduler = build_optimizer(list(model.parameters()), cfg.optim, tc.steps)
    generator = torch.Generator(device=device).manual_seed(cfg.seed)
    arch_hash = cfg.vae_hash()
    run_id = _start_run(store, "vae", cfg, arch_hash)
    last_ckpt: Path | None = None

    def checkpoint(step: int) -> Path:
        return save_checkpoint(
            out,
            {
                "kind": "vae",
                "config": cfg.model_dump(mode="json"),
                "arch_hash": arch_hash,
                "step": step,
                "model": model.state_dict(),
                "optimizer": optimizer.state_dict(),
                "scheduler": scheduler.state_dict(),
            },
        )

    model.train()
    batches = iter(loader)
    for step in range(1, tc.steps + 1):
        batch = next(batches)
        surface = batch["surface"].to(device)
        queries = batch["queries"].to(device)
        labels = batch["labels"].to(device)

        output = model(surface, queries, generator=generator)
        l_recon = recon_loss(output.probs, labels)
        l_kl = klreg_loss(output.dist)
        loss = l_recon + tc.kl_weight * l_kl
        if not torch.isfinite(loss):
            _finish(store, run_id, "nan", last_ckpt, f"non-finite loss at step {step}")
            raise NaNLossError(step, last_ckpt)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
        optimizer.step()
        scheduler.step()

        if step % tc.log_every == 0 or step == tc.steps:
            with torch.no_grad():
                accuracy = float(((output.probs > 0.5) == (labels > 0.5)).float().mean())
            losses = {
                "total": float(loss),
                "recon": float(l_recon),
                "klreg": float(l_kl),
                "accuracy": accuracy,
                "lr": scheduler.get_last_lr()[0],
            }
            logger.info("vae step %d: loss %.5f recon %.5f kl %.4f acc %.4f", step, *list(losses.values())[:4])
            _log_step(store, run_id, step, losses)
        if step % tc.checkpoint_every == 0:
            last_ckpt = checkpoint(step)

    last_ckpt = checkpoint(tc.steps)
    _finish(store, run_id, "done", last_ckpt)
    return last_ckpt


@torch.no_grad()
def precompute_gt_latents(vae_ckpt: Path, data_root: Path, force: bool = False, device: str = "cpu") -> int:
    """Encode every annotated object and store its latent distribution in place.

    Returns the number of objects encoded. Running twice with the same checkpoint
    writes identical values.
    """
    vae, vae_cfg = load_vae(vae_ckpt)
    vae = _freeze(vae).to(resolve_device(device))
    arch_hash = vae_cfg.vae_hash()
    dataset = SceneDataset.load(data_root)

    manifest_cfg = dataset.manifest.get("config", {})
    if manifest_cfg.get("voxel_space", "sphere") != vae_cfg.vae.voxel_space or dataset.n_surface != vae_cfg.vae.n_surface:
        raise ConfigMismatchError(f"{data_root}: dataset normalization does not match the VAE checkpoint")
    previous = (dataset.manifest.get("latents") or {}).get("vae_arch_hash")
    if previous and previous != arch_hash and not force:
        raise ConfigMismatchError(f"{data_root}: latents come from another VAE ({previous[:12]}); pass force to overwrite")

    param = next(vae.parameters())
    count = 0
    for ann in dataset.iter_scenes():
        if not ann.objects:
            continue
        surface = torch.as_tensor(
            np.stack([o.surface_points for o in ann.objects]), dtype=param.dtype, device=param.device
        )
        dist = vae.encode(surface)
        mu = dist.mu.double().cpu().numpy()
        logvar = dist.logvar.double().cpu().numpy()
        for k, obj in enumerate(ann.objects):
            obj.latent_mu = mu[k]
            obj.latent_logvar = logvar[k]
        dataset.update_annotation(ann)
        count += len(ann.objects)
    if dataset.errors:
        logger.warning("%d scenes could not be loaded and were left unchanged", len(dataset.errors))
    dataset.update_manifest(
        latents={"vae_arch_hash": arch_hash, "checkpoint": str(vae_ckpt), "latent_width": vae_cfg.vae.latent_width}
    )
    logger.info("encoded %d objects under %s", count, data_root)
    return count


# --- inference ------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneInference:
    scene_id: str
    reconstructions: list[Reconstruction]
    seconds: float


@torch.no_grad()
def infer_scene(
    detector: Detector, vae: ShapeVAE, dataset: SceneDataset, scene_id: str, cfg: RunConfig
) -> SceneInference:
    """One forward pass for all objects, then confident queries are decoded to meshes."""
    param = next(detector.parameters())
    images = dataset.load_images(scene_id)
    left = image_to_tensor(images.left).unsqueeze(0).to(param)
    right = image_to_tensor(images.right).unsqueeze(0).to(param)
    start = time.perf_counter()
    preds = detector(left, right).scene(0)
    kept = postprocess_predictions(preds, cfg.decoder.confidence_threshold)
    recons = reconstruct_objects(kept, vae, cfg.eval.mesh_resolution)
    return SceneInference(scene_id=scene_id, reconstructions=recons, seconds=time.perf_counter() - start)


def to_scene_prediction(inference: SceneInference, samples: int, seed: int) -> ScenePrediction:
    key = int(inference.scene_id) if inference.scene_id.isdigit() else 0
    rng = np.random.default_rng(np.random.SeedSequence([seed, key]))
    detections, surfaces = [], []
    for rec in inference.reconstructions:
        pred = rec.prediction
        detections.append(Detection(inference.scene_id, pred.index, pred.confidence, pred.frame))
        surfaces.append(rec.mesh.sample_points(samples, rng))
    return ScenePrediction(inference.scene_id, detections, surfaces, inference.seconds)


def predict_dataset(
    detector: Detector, vae: ShapeVAE, dataset: SceneDataset, cfg: RunConfig, limit: int | None = None
) -> tuple[list[ScenePrediction], dict[str, SceneAnnotation]]:
    predictions, annotations = [], {}
    detector.eval()
    vae.eval()
    for ann in dataset.iter_scenes():
        if limit is not None and len(annotations) >= limit:
            break
        try:
            inference = infer_scene(detector, vae, dataset, ann.scene_id, cfg)
        except SceneLoadError as e:
            logger.warning("skipping %s", e)
            continue
        annotations[ann.scene_id] = ann
        predictions.append(to_scene_prediction(inference, cfg.eval.surface_samples, cfg.seed))
    return predictions, annotations


def evaluate_model(
    detector: Detector, vae: ShapeVAE, dataset: SceneDataset, cfg: RunConfig, limit: int | None = None
) -> EvalReport:
    predictions, annotations = predict_dataset(detector, vae, dataset, cfg, limit)
    return asyncio.run(evaluate_scenes(predictions, annotations, cfg.eval, cfg.eval.workers))


# --- stage 2: detector ------------------------------------------------------------------


def _check_dataset_latents(dataset: SceneDataset, vae_hash: str) -> None:
    latents = dataset.manifest.get("latents") or {}
    if latents.get("vae_arch_hash") != vae_hash:
        raise ConfigMismatchError(f"{dataset.root}: GT latents missing or from another VAE; run encode-gt first")


def train_detector(
    cfg: RunConfig,
    vae_ckpt: Path,
    data_root: Path | None = None,
    out: Path | None = None,
    store: RunStore | None = None,
    force: bool = False,
) -> Path:
    """Train backbone, TPV encoder and decoder against the frozen VAE's latents."""
    seed_everything(cfg.seed, cfg.strict_deterministic)
    device = resolve_device(cfg.device)
    data_root = data_root or cfg.data.root
    tc = cfg.train_detector
    out = out or cfg.resolved_run_dir() / "detector.pt"

    vae, vae_cfg = load_vae(vae_ckpt, cfg, force)
    vae = _freeze(vae).to(device)
    vae_before = model_fingerprint(vae)

    needs_latents = cfg.loss.lambda_shape > 0 or cfg.loss.match_with_shape
    train_set = DetectionDataset(data_root / "train", n_queries=RECON_QUERIES, require_latents=needs_latents)
    if needs_latents:
        _check_dataset_latents(train_set.scenes, vae_cfg.vae_hash())
    if len(train_set) == 0:
        raise DatasetError(f"no training scenes under {data_root / 'train'}")
    val_root = data_root / "val"
    val_set = SceneDataset.load(val_root) if (val_root / "manifest.json").exists() else None
    if val_set is None:
        logger.warning("no validation split under %s; skipping periodic validation", val_root)

    loader = DataLoader(
        train_set,
        batch_size=tc.batch_size,
        shuffle=True,
        num_workers=tc.workers,
        collate_fn=collate_scenes,
        generator=torch.Generator().manual_seed(cfg.seed),
    )
    detector = Detector(cfg).to(device)
    total_steps = tc.epochs * len(loader)
    optimizer, scheduler = build_optimizer(list(detector.parameters()), cfg.optim, total_steps)
    arch_hash = cfg.detector_hash()
    run_id = _start_run(store, "detector", cfg, arch_hash)
    last_ckpt: Path | None = None
    logger.info("training detector: %d scenes, %d epochs, %d steps", len(train_set), tc.epochs, total_steps)

    def checkpoint(step: int) -> Path:
        return save_checkpoint(
            out,
            {
                "kind": "detector",
                "config": cfg.model_dump(mode="json"),
                "arch_hash": arch_hash,
                "step": step,
                "model": detector.state_dict(),
                "optimizer": optimizer.state_dict(),
                "scheduler": scheduler.state_dict(),
                "vae": {
                    "config": vae_cfg.model_dump(mode="json"),
                    "arch_hash": vae_cfg.vae_hash(),
                    "model": vae.state_dict(),
                },
            },
        )

    step = 0
    for epoch in range(1, tc.epochs + 1):
        detector.train()
        for batch in loader:
            step += 1
            left, right = batch["left"].to(device), batch["right"].to(device)
            targets = [t.to(device) for t in batch["targets"]]
            preds = detector(left, right)
            assignments = match_batch(preds, targets, cfg.loss)
            loss, breakdown = detection_loss(
                preds, targets, assignments, cfg.loss, vae if cfg.loss.shape_recon_weight > 0 else None
            )
            if not torch.isfinite(loss):
                _finish(store, run_id, "nan", last_ckpt, f"non-finite loss at step {step}")
                raise NaNLossError(step, last_ckpt)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(detector.parameters(), cfg.optim.grad_clip)
            optimizer.step()
            scheduler.step()

            if step % tc.log_every == 0:
                losses = {**breakdown.as_dict(), "lr": scheduler.get_last_lr()[0], "epoch": epoch}
                logger.info(
                    "detector step %d: total %.4f pos %.4f scale %.4f shape %.4f conf %.4f",
                    step,
                    breakdown.total,
                    breakdown.position,
                    breakdown.scale,
                    breakdown.shape,
                    breakdown.confidence,
                )
                _log_step(store, run_id, step, losses)

        last_ckpt = checkpoint(step)
        if val_set is not None and (epoch % tc.val_every == 0 or epoch == tc.epochs):
            report = evaluate_model(detector, vae, val_set, cfg, limit=tc.val_limit)
            logger.info("epoch %d validation: AP@0.5 %.3f ACD %s", epoch, report.aggregates["ap50"], report.aggregates["acd"])
            if store is not None and run_id is not None:
                store.add_eval(run_id, "val", report.aggregates)

    if model_fingerprint(vae) != vae_before:
        _finish(store, run_id, "failed", last_ckpt, "VAE parameters changed")
        raise FrozenModelError("VAE parameters changed during detector training")
    _finish(store, run_id, "done", last_ckpt)
    return last_ckpt


# --- commands ----------------------------------------------------------------------------


def run_evaluation(
    cfg: RunConfig,
    ckpt: Path,
    split: str = "val",
    data_root: Path | None = None,
    out_dir: Path | None = None,
    store: RunStore | None = None,
    force: bool = False,
) -> tuple[EvalReport, Path]:
    device = resolve_device(cfg.device)
    detector, vae, stored = load_detector(ckpt, cfg, force)
    detector, vae = detector.to(device), _freeze(vae).to(device)
    dataset = SceneDataset.load((data_root or cfg.data.root) / split)
    eval_cfg = stored.model_copy(update={"eval": cfg.eval, "seed": cfg.seed, "device": cfg.device})
    report = evaluate_model(detector, vae, dataset, eval_cfg)

    run_id = _start_run(store, "eval", eval_cfg, stored.detector_hash()) or uuid.uuid4().hex[:12]
    out_dir = out_dir or cfg.resolved_run_dir() / f"eval-{split}-{run_id}"
    report.write(out_dir, eval_cfg.model_dump(mode="json"), run_id)
    if store is not None:
        store.add_eval(run_id, split, report.aggregates)
        _finish(store, run_id, "done", ckpt)
    return report, out_dir


def reconstruct_scene(
    ckpt: Path,
    scene_id: str,
    out_dir: Path,
    split: str = "val",
    data_root: Path | None = None,
    cfg: RunConfig | None = None,
    force: bool = False,
    stl: bool = False,
) -> Path:
    detector, vae, stored = load_detector(ckpt, cfg, force)
    device = resolve_device(cfg.device if cfg is not None else stored.device)
    detector, vae = detector.to(device).eval(), _freeze(vae).to(device)
    root = (data_root or (cfg or stored).data.root) / split
    inference = infer_scene(detector, vae, SceneDataset.load(root), scene_id, stored)
    logger.info("scene %s: %d objects in %.3fs", scene_id, len(inference.reconstructions), inference.seconds)
    return export_reconstructions(out_dir, scene_id, inference.reconstructions, stl=stl)


def parse_object_ref(ref: str) -> tuple[str, int]:
    scene, _, index = ref.partition(":")
    if not scene or not index.isdigit():
        raise DatasetError(f"object reference must look like SCENE:INDEX, got {ref!r}")
    return scene, int(index)


@torch.no_grad()
def interpolate_shapes(
    vae_ckpt: Path,
    data_root: Path,
    a: tuple[str, int],
    b: tuple[str, int],
    out_dir: Path,
    steps: int = 5,
    resolution: int = 48,
) -> list[Path]:
    """Export meshes decoded along the straight line between two objects' latent means."""
    vae, _ = load_vae(vae_ckpt)
    vae = _freeze(vae)
    dataset = SceneDataset.load(data_root)
    param = next(vae.parameters())

    def encode(ref: tuple[str, int]) -> torch.Tensor:
        ann = dataset.load_annotation(ref[0])
        if not 0 <= ref[1] < len(ann.objects):
            raise DatasetError(f"scene {ref[0]} has no object {ref[1]}")
        pts = torch.as_tensor(ann.objects[ref[1]].surface_points, dtype=param.dtype)
        return vae.encode(pts).mu

    za, zb = encode(a), encode(b)
    ts = np.linspace(0.0, 1.0, max(2, steps))
    z = torch.stack([interpolate_latents(za, zb, float(t)) for t in ts])
    paths = []
    for t, mesh in zip(ts, extract_surfaces(vae, z, resolution)):
        if mesh.is_empty:
            logger.warning("t=%.2f decoded to an empty surface", t)
            continue
        paths.append(mesh.export(out_dir / f"interp_{t:.2f}.obj"))
    return paths
