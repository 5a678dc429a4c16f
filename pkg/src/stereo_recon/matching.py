"""One-to-one assignment of predictions to ground truth, and the detection loss."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import LossConfig
from .dataset import SceneTargets
from .detector import ObjectPredictions
from .errors import CapacityError, DatasetError
from .vae import PROB_EPS, LatentDistribution, ShapeVAE, recon_loss


logger = logging.getLogger(__name__)

GT_VAR_MIN = 1e-6
TIE_TOL = 1e-9


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    unmatched: tuple[int, ...]
    total: float = 0.0

    @property
    def pred_indices(self) -> list[int]:
        return [i for i, _ in self.pairs]

    @property
    def gt_indices(self) -> list[int]:
        return [j for _, j in self.pairs]


def _as_f64(x: object) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().double().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def matching_cost_matrix(
    pred_position: object,
    pred_scale: object,
    pred_confidence: object,
    gt_position: object,
    gt_scale: object,
    weights: LossConfig,
    pred_shape: LatentDistribution | None = None,
    gt_shape: LatentDistribution | None = None,
) -> np.ndarray:
    """``M x K`` matching cost from position L1, scale gap and confidence.

    With ``weights.match_with_shape`` the per-pair latent divergence is added.
    """
    p_pos, p_scale, p_conf = _as_f64(pred_position), _as_f64(pred_scale), _as_f64(pred_confidence)
    g_pos, g_scale = _as_f64(gt_position).reshape(-1, 3), _as_f64(gt_scale).reshape(-1)
    cost = (
        weights.w_pos * np.abs(p_pos[:, None, :] - g_pos[None, :, :]).sum(axis=-1)
        + weights.w_scale * np.abs(p_scale[:, None] - g_scale[None, :])
        + weights.w_conf * (1.0 - p_conf)[:, None]
    )
    if weights.match_with_shape and pred_shape is not None and gt_shape is not None and g_pos.shape[0]:
        pairwise = LatentDistribution(mu=pred_shape.mu[:, None, :], logvar=pred_shape.logvar[:, None, :])
        target = LatentDistribution(mu=gt_shape.mu[None, :, :], logvar=gt_shape.logvar[None, :, :])
        with torch.no_grad():
            cost = cost + weights.w_shape * _as_f64(kl_matched_terms(pairwise, target))
    return cost


def _assignment_total(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian_assign(cost: np.ndarray) -> Assignment:
    """Minimum-total injective assignment of every column (GT) to a row (prediction).

    Among optimal assignments, the one whose rows, listed by GT index, form the
    lexicographically smallest sequence is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, k = cost.shape
    if m < k:
        raise CapacityError(f"{m} predictions cannot cover {k} ground-truth objects")
    if k == 0:
        return Assignment(pairs=(), unmatched=tuple(range(m)), total=0.0)

    optimum = _assignment_total(cost)
    tol = TIE_TOL * max(1.0, abs(optimum))
    used: list[int] = []
    fixed_total = 0.0
    pairs: list[tuple[int, int]] = []
    for j in range(k):
        for i in range(m):
            if i in used:
                continue
            rest_rows = [r for r in range(m) if r not in used and r != i]
            rest = cost[np.ix_(rest_rows, list(range(j + 1, k)))]
            if fixed_total + cost[i, j] + _assignment_total(rest) <= optimum + tol:
                used.append(i)
                fixed_total += cost[i, j]
                pairs.append((i, j))
                break
        else:
            # no row reproduced the optimum within tolerance; keep the solver's pairs
            logger.debug("tie-break lost column %d to rounding, using solver assignment", j)
            rows, cols = linear_sum_assignment(cost)
            pairs = sorted(zip(rows.tolist(), cols.tolist()), key=lambda p: p[1])
            used = [i for i, _ in pairs]
            fixed_total = float(cost[rows, cols].sum())
            break
    unmatched = tuple(i for i in range(m) if i not in used)
    return Assignment(pairs=tuple(pairs), unmatched=unmatched, total=fixed_total)


def kl_matched_terms(pred: LatentDistribution, gt: LatentDistribution) -> torch.Tensor:
    """Per-pair channel mean of 0.5 * (((mu_p - mu)^2 + var_p) / var - logvar_p + log var)."""
    gt_var = torch.exp(gt.logvar).clamp_min(GT_VAR_MIN)
    per_channel = 0.5 * (((pred.mu - gt.mu).pow(2) + pred.var) / gt_var - pred.logvar + torch.log(gt_var))
    return per_channel.mean(dim=-1)


def kl_matched_loss(pred: LatentDistribution, gt: LatentDistribution) -> torch.Tensor:
    """Distribution distance of matched pairs; 0.5 when the two coincide."""
    return kl_matched_terms(pred, gt).mean()


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    position: float
    scale: float
    shape: float
    shape_excess: float
    confidence: float
    recon: float
    matched: int

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def match_batch(preds: ObjectPredictions, targets: list[SceneTargets], weights: LossConfig) -> list[Assignment]:
    out = []
    for b, tgt in enumerate(targets):
        gt_shape = None
        if tgt.mu is not None and tgt.logvar is not None:
            gt_shape = LatentDistribution(mu=tgt.mu, logvar=tgt.logvar)
        cost = matching_cost_matrix(
            preds.position[b],
            preds.scale[b],
            preds.confidence[b],
            tgt.position,
            tgt.scale,
            weights,
            pred_shape=preds.shape[b].detach(),
            gt_shape=gt_shape,
        )
        out.append(hungarian_assign(cost))
    return out


def detection_loss(
    preds: ObjectPredictions,
    targets: list[SceneTargets],
    assignments: list[Assignment],
    weights: LossConfig,
    vae: ShapeVAE | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Position + scale + lambda_shape * shape + lambda_conf * confidence (+ recon).

    Matched terms are means over all matched pairs in the batch.
    """
    device = preds.position.device
    b_idx, p_idx, scene_of, g_idx = [], [], [], []
    for b, asg in enumerate(assignments):
        for i, j in asg.pairs:
            b_idx.append(b)
            p_idx.append(i)
            scene_of.append(b)
            g_idx.append(j)
    n = len(p_idx)
    zero = preds.position.sum() * 0.0

    conf_target = torch.zeros_like(preds.confidence)
    conf_weight = torch.full_like(preds.confidence, weights.unmatched_conf_weight)
    if n:
        bi = torch.as_tensor(b_idx, device=device)
        pi = torch.as_tensor(p_idx, device=device)
        conf_target[bi, pi] = 1.0
        conf_weight[bi, pi] = 1.0

        gt_pos = torch.stack([targets[b].position[j] for b, j in zip(scene_of, g_idx)]).to(preds.position)
        gt_scale = torch.stack([targets[b].scale[j] for b, j in zip(scene_of, g_idx)]).to(preds.scale)
        l_pos = (preds.position[bi, pi] - gt_pos).abs().sum(dim=-1).mean()
        l_scale = (preds.scale[bi, pi] - gt_scale).abs().mean()

        if weights.lambda_shape > 0:
            if any(targets[b].mu is None for b in set(scene_of)):
                raise DatasetError("shape loss needs GT latents; run encode-gt first")
            gt_dist = LatentDistribution(
                mu=torch.stack([targets[b].mu[j] for b, j in zip(scene_of, g_idx)]).to(preds.shape.mu),
                logvar=torch.stack([targets[b].logvar[j] for b, j in zip(scene_of, g_idx)]).to(preds.shape.mu),
            )
            l_shape = kl_matched_loss(preds.shape[bi, pi], gt_dist)
        else:
            l_shape = zero

        if weights.shape_recon_weight > 0 and vae is not None:
            queries = torch.stack([targets[b].occ_queries[j] for b, j in zip(scene_of, g_idx)]).to(preds.shape.mu)
            labels = torch.stack([targets[b].occ_labels[j] for b, j in zip(scene_of, g_idx)]).to(preds.shape.mu)
            l_recon = recon_loss(vae.decode(preds.shape.mu[bi, pi], queries), labels)
        else:
            l_recon = zero
    else:
        l_pos = l_scale = l_shape = l_recon = zero

    p = preds.confidence.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(conf_target * torch.log(p) + (1.0 - conf_target) * torch.log1p(-p))
    l_conf = (conf_weight * bce).sum() / conf_weight.sum().clamp_min(PROB_EPS)

    total = (
        l_pos
        + l_scale
        + weights.lambda_shape * l_shape
        + weights.lambda_conf * l_conf
        + weights.shape_recon_weight * l_recon
    )
    shape_value = float(l_shape.detach())
    breakdown = LossBreakdown(
        total=float(total.detach()),
        position=float(l_pos.detach()),
        scale=float(l_scale.detach()),
        shape=shape_value,
        shape_excess=shape_value - 0.5 if n and weights.lambda_shape > 0 else 0.0,
        confidence=float(l_conf.detach()),
        recon=float(l_recon.detach()),
        matched=n,
    )
    return total, breakdown
