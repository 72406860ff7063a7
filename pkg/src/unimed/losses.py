"""Supervised and contrastive loss terms."""

from __future__ import annotations

import itertools

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor


class TrainingDataError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


# -- set matching -----------------------------------------------------------


def hungarian_match(cost: np.ndarray | Tensor) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ground truths (columns) to queries (rows).

    Returns (query, gt) pairs sorted by gt index. When two queries have
    identical cost rows the lower query index is preferred. Non-finite costs
    count as the worst possible pairing.
    """
    cost = np.asarray(cost.detach().cpu() if isinstance(cost, Tensor) else cost, dtype=np.float64)
    cost = np.where(np.isfinite(cost), cost, np.finfo(np.float64).max / (cost.size + 1))
    m, n = cost.shape
    if n == 0:
        return []
    if n > m:
        raise TrainingDataError(f"{n} objects but only {m} queries")
    gt_idx, q_idx = linear_sum_assignment(cost.T)
    chosen = dict(zip(gt_idx.tolist(), q_idx.tolist()))
    used = set(chosen.values())
    for j in sorted(chosen):
        q = chosen[j]
        for lower in range(q):
            if lower not in used and np.array_equal(cost[lower], cost[q]):
                used.discard(q)
                used.add(lower)
                chosen[j] = lower
                break
    return [(chosen[j], j) for j in sorted(chosen)]


def brute_force_match(cost: np.ndarray) -> float:
    """Exhaustive minimum assignment cost, for checking the matcher."""
    m, n = cost.shape
    if n == 0:
        return 0.0
    perms = np.array(list(itertools.permutations(range(m), n)))
    return float(cost[perms, np.arange(n)].sum(axis=1).min())


# -- semantic ---------------------------------------------------------------


def semantic_loss(
    matched_logits: Tensor,
    matched_targets: Tensor,
    unmatched_logits: Tensor,
    no_object: int,
    no_object_weight: float = 0.1,
    ignore_index: int = -100,
) -> Tensor:
    """Weighted token cross-entropy.

    matched_logits (N, T, V) with targets (N, T) (``ignore_index`` past the
    end); unmatched_logits (U, V) are first-step logits of queries that
    should predict NO_OBJECT, each weighted ``no_object_weight``.
    """
    total = matched_logits.new_zeros(())
    weight = 0.0
    if matched_logits.numel():
        ce = F.cross_entropy(matched_logits.flatten(0, 1), matched_targets.flatten(), ignore_index=ignore_index, reduction="sum")
        total = total + ce
        weight += float((matched_targets != ignore_index).sum())
    if unmatched_logits.numel():
        tgt = torch.full((unmatched_logits.shape[0],), no_object, dtype=torch.long)
        total = total + no_object_weight * F.cross_entropy(unmatched_logits, tgt, reduction="sum")
        weight += no_object_weight * unmatched_logits.shape[0]
    return total / weight if weight else total


# -- pixel --------------------------------------------------------------------


def soft_dice(prob: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    """Per-mask soft Dice over the trailing two dims."""
    inter = (prob * target).flatten(-2).sum(-1)
    return (2 * inter + eps) / (prob.flatten(-2).sum(-1) + target.flatten(-2).sum(-1) + eps)


def pixel_loss(logits: Tensor, target: Tensor, eps: float = 1.0) -> Tensor:
    """Mean over masks of pixel-mean BCE plus (1 - soft Dice). logits/target (K, h, w)."""
    if logits.shape[0] == 0:
        return logits.new_zeros(())
    target = target.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none").flatten(1).mean(1)
    dice = soft_dice(logits.sigmoid(), target, eps)
    return (bce + 1 - dice).mean()


def pairwise_mask_cost(logits: Tensor, targets: Tensor, eps: float = 1.0) -> Tensor:
    """(m, h, w) logits vs (n, h, w) targets -> (m, n) BCE + (1 - Dice)."""
    p = logits.flatten(1)
    t = targets.flatten(1).to(p.dtype)
    hw = p.shape[1]
    pos = F.binary_cross_entropy_with_logits(p, torch.ones_like(p), reduction="none")
    neg = F.binary_cross_entropy_with_logits(p, torch.zeros_like(p), reduction="none")
    bce = (pos @ t.T + neg @ (1 - t).T) / hw
    prob = p.sigmoid()
    dice = (2 * prob @ t.T + eps) / (prob.sum(1)[:, None] + t.sum(1)[None, :] + eps)
    return bce + 1 - dice


# -- contrastive --------------------------------------------------------------


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm <= eps).any():
        raise NormalizationError("zero-norm feature cannot be normalized")
    return x / norm


def info_nce(q: Tensor, k_pos: Tensor, k_negs: Tensor, temperature: float) -> Tensor:
    """Per-row InfoNCE. q, k_pos (N, D); k_negs (K, D); all unit-norm.

    Negative similarities are sorted before the log-sum-exp so the result is
    bitwise independent of queue order.
    """
    pos = (q * k_pos).sum(-1, keepdim=True)
    neg = (q[:, None, :] * k_negs[None]).sum(-1).sort(dim=1).values
    logits = torch.cat([pos, neg], dim=1) / temperature
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def contrastive_loss(q: Tensor, k_pos: Tensor, k_negs: Tensor, temperature: float = 0.2) -> Tensor:
    """Mean InfoNCE over a batch of (query, positive key) rows against a negative queue."""
    if q.dim() == 1:
        q, k_pos = q[None], k_pos[None]
    q, k_pos, k_negs = l2_normalize(q), l2_normalize(k_pos), l2_normalize(k_negs)
    return info_nce(q, k_pos, k_negs, temperature).mean()


def backbone_correspondence(feat1: Tensor, feat2: Tensor) -> Tensor:
    """For every position of view 1, the most cosine-similar position of view 2.

    feat1 (B, P, d), feat2 (B, P2, d) -> (B, P) indices. Ties go to the lowest index.
    """
    sim = F.normalize(feat1, dim=-1) @ F.normalize(feat2, dim=-1).transpose(1, 2)
    return sim.argmax(dim=-1)


def dense_contrastive_loss(
    dense1: Tensor,
    dense2: Tensor,
    match: Tensor,
    k_negs: Tensor,
    temperature: float = 0.2,
) -> Tensor:
    """InfoNCE between each view-1 dense vector and its matched view-2 vector.

    dense1 (B, P, D), dense2 (B, P2, D), match (B, P) indices into view 2.
    """
    if dense1.shape[1] < 2:
        raise ValueError("dense contrast needs at least 2 spatial positions")
    q = l2_normalize(dense1)
    k = l2_normalize(dense2)
    pos = torch.gather(k, 1, match[..., None].expand(-1, -1, k.shape[-1]))
    return info_nce(q.flatten(0, 1), pos.flatten(0, 1), l2_normalize(k_negs), temperature).mean()
