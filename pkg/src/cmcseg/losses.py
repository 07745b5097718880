"""Training objectives and the epoch-based weighting schedule.

Contrastive terms come in two denominator forms:

``literal``
    softmax over the same-index (positive-pair) similarities only, i.e. the
    denominator sums ``exp(sim(a_i, b_i))`` over ``i``. Minimized when all
    positive similarities are equal.
``full``
    InfoNCE: row-wise softmax over the full ``sim(a_i, b_j)`` matrix, so
    cross-index pairs act as negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

COS_EPS = 1e-8
DICE_EPS = 1e-5
ALPHA_MAX = 0.1
RAMP_STEEPNESS = 5.0


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {tuple(u.shape)} vs {tuple(v.shape)}")
    u, v = u.reshape(-1), v.reshape(-1)
    nu = torch.clamp(u.norm(), min=COS_EPS)
    nv = torch.clamp(v.norm(), min=COS_EPS)
    return (u @ v) / (nu * nv)


def _channel_cosine_matrix(f_a: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
    """(C, C) matrix of cosine similarities between flattened channels of two (C, ...) maps."""
    a = f_a.reshape(f_a.shape[0], -1)
    b = f_b.reshape(f_b.shape[0], -1)
    a = a / torch.clamp(a.norm(dim=1, keepdim=True), min=COS_EPS)
    b = b / torch.clamp(b.norm(dim=1, keepdim=True), min=COS_EPS)
    return a @ b.T


def _contrastive(sim: torch.Tensor, denominator: str) -> torch.Tensor:
    """Sum over i of -log softmax at the positive entry, from an (n, n) similarity matrix."""
    if denominator == "literal":
        return 0.0 - torch.log_softmax(torch.diagonal(sim), dim=0).sum()
    if denominator == "full":
        return 0.0 - torch.diagonal(torch.log_softmax(sim, dim=1)).sum()
    raise ValueError(f"unknown contrastive denominator {denominator!r}")


def csc_loss(f_a: torch.Tensor, f_b: torch.Tensor, denominator: str = "literal") -> torch.Tensor:
    """Channel-wise semantic consistency between two feature maps.

    Accepts a single map (C, D, H, W) or a batch (B, C, D, H, W); batches
    return the mean of the per-sample losses.
    """
    if f_a.shape != f_b.shape:
        raise ValueError(f"feature shape mismatch: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
    if f_a.dim() == 5:
        return torch.stack([csc_loss(a, b, denominator) for a, b in zip(f_a, f_b)]).mean()
    if denominator == "literal":
        a = f_a.reshape(f_a.shape[0], -1)
        b = f_b.reshape(f_b.shape[0], -1)
        diag = (a * b).sum(1) / (torch.clamp(a.norm(dim=1), min=COS_EPS) * torch.clamp(b.norm(dim=1), min=COS_EPS))
        return -torch.log_softmax(diag, dim=0).sum()
    return _contrastive(_channel_cosine_matrix(f_a, f_b), denominator)


def _per_sample_sums(x: torch.Tensor) -> torch.Tensor:
    # (B, K, ...) -> (B, K)
    return x.reshape(x.shape[0], x.shape[1], -1).sum(-1)


def one_hot(mask: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, D, H, W) integer labels -> (B, K, D, H, W) float one-hot."""
    return F.one_hot(mask.long(), num_classes).movedim(-1, 1).to(torch.get_default_dtype())


def _batched(probs: torch.Tensor, mask: torch.Tensor):
    if probs.dim() == 4:
        probs, mask = probs.unsqueeze(0), mask.unsqueeze(0)
    if probs.shape[0] != mask.shape[0] or probs.shape[2:] != mask.shape[1:]:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs mask {tuple(mask.shape)}")
    return probs, mask


def soft_dice_loss(probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """1 - mean foreground soft Dice; probs (K, ...) or (B, K, ...), mask integer labels."""
    probs, mask = _batched(probs, mask)
    y = one_hot(mask, probs.shape[1]).to(probs.dtype)
    inter = _per_sample_sums(probs * y)[:, 1:]
    denom = _per_sample_sums(probs)[:, 1:] + _per_sample_sums(y)[:, 1:]
    dice = (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    return 1 - dice.mean()


def cross_entropy_loss(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    logits, mask = _batched(logits, mask)
    return F.cross_entropy(logits, mask.long())


def supervised_loss(logits_a, mask_a, logits_b, mask_b, mode: str = "symmetric") -> torch.Tensor:
    """``symmetric``: mean over modalities of CE + Dice. ``literal``: CE on a plus Dice on b."""
    if mask_a is None or mask_b is None:
        raise ValueError("supervised loss needs both masks")
    if mode == "literal":
        return cross_entropy_loss(logits_a, mask_a) + soft_dice_loss(torch.softmax(logits_b, dim=-4), mask_b)
    if mode == "symmetric":
        la = cross_entropy_loss(logits_a, mask_a) + soft_dice_loss(torch.softmax(logits_a, dim=-4), mask_a)
        lb = cross_entropy_loss(logits_b, mask_b) + soft_dice_loss(torch.softmax(logits_b, dim=-4), mask_b)
        return (la + lb) / 2
    raise ValueError(f"unknown supervised mode {mode!r}")


def dice_similarity(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Soft Dice overlap of two (K, ...) probability maps, averaged over foreground classes."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    p = p.reshape(p.shape[0], -1)[1:]
    q = q.reshape(q.shape[0], -1)[1:]
    num = 2 * (p * q).sum(1) + DICE_EPS
    den = (p * p).sum(1) + (q * q).sum(1) + DICE_EPS
    return (num / den).mean()


def dice_similarity_matrix(preds_a: torch.Tensor, preds_b: torch.Tensor) -> torch.Tensor:
    """(M, M) matrix of dice_similarity(preds_a[i], preds_b[j])."""
    m, k = preds_a.shape[:2]
    a = preds_a.reshape(m, k, -1)[:, 1:]
    b = preds_b.reshape(m, k, -1)[:, 1:]
    num = 2 * torch.einsum("ikv,jkv->ijk", a, b) + DICE_EPS
    den = (a * a).sum(-1)[:, None, :] + (b * b).sum(-1)[None, :, :] + DICE_EPS
    return (num / den).mean(-1)


def cac_loss(preds_a: torch.Tensor, preds_b: torch.Tensor, denominator: str = "literal") -> torch.Tensor:
    """Contrastive anatomical consistency over a batch (M, K, ...) of softmaxed predictions."""
    if preds_a.shape[0] != preds_b.shape[0]:
        raise ValueError(f"batch length mismatch: {preds_a.shape[0]} vs {preds_b.shape[0]}")
    if preds_a.shape != preds_b.shape:
        raise ValueError(f"prediction shape mismatch: {tuple(preds_a.shape)} vs {tuple(preds_b.shape)}")
    if denominator == "literal":
        sims = torch.stack([dice_similarity(a, b) for a, b in zip(preds_a, preds_b)])
        return 0.0 - torch.log_softmax(sims, dim=0).sum()
    return _contrastive(dice_similarity_matrix(preds_a, preds_b), denominator)


def ramp_weights(t: int, t_max: int) -> tuple[float, float]:
    """(alpha, beta) at epoch ``t``: alpha ramps up to 0.1, beta ramps down from 0.1.

    Both use the same expression on mirrored arguments so alpha(t) == beta(t_max - t) bit-for-bit.
    """
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if not (0 <= t <= t_max):
        raise ValueError(f"epoch {t} outside [0, {t_max}]")
    alpha = ALPHA_MAX * math.exp(-RAMP_STEEPNESS * (t_max - t) / t_max)
    beta = ALPHA_MAX * math.exp(-RAMP_STEEPNESS * t / t_max)
    return alpha, beta


@dataclass
class LossBreakdown:
    sup: float
    csc: float
    cac: float
    alpha: float
    beta: float
    total: float


def weighted_total(sup, csc, cac, alpha: float, beta: float):
    """sup + alpha*csc + beta*cac; works on floats and tensors alike."""
    return sup + alpha * csc + beta * cac


def total_loss(sup: float, csc: float, cac: float, t: int, t_max: int,
               use_csc: bool = True, use_cac: bool = True) -> LossBreakdown:
    vals = [float(v) for v in (sup, csc, cac)]
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError(f"non-finite loss component: sup={vals[0]} csc={vals[1]} cac={vals[2]}")
    sup, csc, cac = vals
    if not use_csc:
        csc = 0.0
    if not use_cac:
        cac = 0.0
    alpha, beta = ramp_weights(t, t_max)
    return LossBreakdown(sup, csc, cac, alpha, beta, weighted_total(sup, csc, cac, alpha, beta))


LOG_COLUMNS = ("step", "epoch", "sup", "csc", "cac", "alpha", "beta", "total")
