"""Training losses, evaluation metrics, ensembling and pseudo-labels.

Differentiable losses operate on torch tensors; metrics take hard numpy
masks and count pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .hsi_core import Domain


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


# --------------------------------------------------------------------------
# segmentation losses


def dice_loss(pred: torch.Tensor, gt: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """1 - (2 sum(p g) + s) / (sum p + sum g + s), summed over every element."""
    _check_same_shape(pred, gt)
    if smooth <= 0:
        raise ValueError("smooth must be positive")
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + gt.sum() + smooth)


def _soft_erode(x):
    p1 = -F.max_pool2d(-x, (3, 1), stride=1, padding=(1, 0))
    p2 = -F.max_pool2d(-x, (1, 3), stride=1, padding=(0, 1))
    return torch.minimum(p1, p2)


def _soft_dilate(x):
    return F.max_pool2d(x, 3, stride=1, padding=1)


def _soft_open(x):
    return _soft_dilate(_soft_erode(x))


def soft_skeletonize(mask: torch.Tensor, iterations: int = 10) -> torch.Tensor:
    """Differentiable morphological skeleton of a soft mask in [0, 1].

    Accepts ``(..., H, W)``. Each pass erodes the mask and keeps what an
    opening would remove; the residuals are OR-ed together.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    shape = mask.shape
    x = mask.reshape(-1, 1, shape[-2], shape[-1])
    skel = F.relu(x - _soft_open(x))
    for _ in range(iterations):
        x = _soft_erode(x)
        delta = F.relu(x - _soft_open(x))
        skel = skel + F.relu(delta - skel * delta)
    return skel.reshape(shape)


def soft_cldice(pred: torch.Tensor, gt: torch.Tensor, iterations: int = 10, smooth: float = 1.0) -> torch.Tensor:
    gt = gt.to(pred.dtype)
    skel_pred = soft_skeletonize(pred, iterations)
    skel_gt = soft_skeletonize(gt, iterations)
    tprec = ((skel_pred * gt).sum() + smooth) / (skel_pred.sum() + smooth)
    tsens = ((skel_gt * pred).sum() + smooth) / (skel_gt.sum() + smooth)
    return 2.0 * tprec * tsens / (tprec + tsens)


def cldice_loss(
    pred: torch.Tensor, gt: torch.Tensor, iterations: int = 10, alpha: float = 0.5, smooth: float = 1.0
) -> torch.Tensor:
    """alpha * dice_loss + (1 - alpha) * (1 - soft clDice)."""
    _check_same_shape(pred, gt)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    dl = dice_loss(pred, gt, smooth)
    if alpha == 1.0:
        return dl
    return alpha * dl + (1.0 - alpha) * (1.0 - soft_cldice(pred, gt, iterations, smooth))


def bce_seg_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_same_shape(pred, gt)
    return F.binary_cross_entropy(pred.clamp(1e-6, 1 - 1e-6), gt.to(pred.dtype))


# --------------------------------------------------------------------------
# adversarial and cycle losses


def _domain_label(domain) -> float:
    return 0.0 if Domain(domain) is Domain.SOURCE else 1.0


def global_domain_loss(logits: torch.Tensor, domain) -> torch.Tensor:
    """Mean BCE of per-sample logits against source=0 / target=1."""
    labels = torch.full_like(logits, _domain_label(domain))
    return F.binary_cross_entropy_with_logits(logits, labels)


def _soft_targets(class_probs: torch.Tensor, domain, tol: float = 1e-3) -> torch.Tensor:
    sums = class_probs.sum(dim=1)
    if torch.any((sums - 1.0).abs() > tol):
        raise ValueError("class_probs must sum to 1 over the class axis")
    zeros = torch.zeros_like(class_probs)
    if Domain(domain) is Domain.SOURCE:
        return torch.cat([class_probs, zeros], dim=1)
    return torch.cat([zeros, class_probs], dim=1)


def fada_discriminator_loss(disc_out: torch.Tensor, class_probs: torch.Tensor, domain) -> torch.Tensor:
    """Soft-label cross-entropy over the 2K discriminator channels.

    ``disc_out`` is ``(B, 2K, h, w)``, ``class_probs`` is ``(B, K, h, w)``.
    The class distribution fills the source half for source samples and the
    target half for target samples. Averaged over pixels and batch.
    """
    b, k2, h, w = disc_out.shape
    if tuple(class_probs.shape) != (b, k2 // 2, h, w) or k2 % 2:
        raise ValueError(
            f"disc_out {tuple(disc_out.shape)} incompatible with class_probs {tuple(class_probs.shape)}"
        )
    target = _soft_targets(class_probs.to(disc_out.dtype), domain)
    return -(target * F.log_softmax(disc_out, dim=1)).sum(dim=1).mean()


def fada_adversarial_loss(disc_out: torch.Tensor, class_probs: torch.Tensor) -> torch.Tensor:
    """Encoder-side loss: target features should be scored as source-of-their-class."""
    return fada_discriminator_loss(disc_out, class_probs, Domain.SOURCE)


def cycle_l1(recon: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    _check_same_shape(recon, original)
    return (recon - original).abs().mean()


# --------------------------------------------------------------------------
# pseudo-labels and ensembling


def downsample_probs(probs: torch.Tensor, size) -> torch.Tensor:
    """Area-average ``(B, K, H, W)`` class maps to ``size`` and renormalize."""
    pooled = F.adaptive_avg_pool2d(probs, size)
    return pooled / pooled.sum(dim=1, keepdim=True).clamp_min(1e-12)


def pseudo_labels(probs: torch.Tensor, size=None) -> torch.Tensor:
    """Soft pseudo-labels: the detached softmax map, optionally area-downsampled."""
    probs = probs.detach()
    if size is None:
        return probs
    return downsample_probs(probs, size)


def one_hot_masks(masks: torch.Tensor, num_classes: int = 2) -> torch.Tensor:
    """``(B, H, W)`` integer masks -> ``(B, K, H, W)`` float one-hot."""
    return F.one_hot(masks.long(), num_classes).permute(0, 3, 1, 2).float()


def ensemble_average(prob_maps: Sequence[np.ndarray], threshold: float = 0.5) -> np.ndarray:
    """Average foreground probability maps and threshold (ties count as foreground)."""
    if len(prob_maps) == 0:
        raise ValueError("ensemble_average needs at least one map")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    shape = np.shape(prob_maps[0])
    for m in prob_maps[1:]:
        if np.shape(m) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(m)}")
    mean = np.mean(np.stack([np.asarray(m, dtype=np.float64) for m in prob_maps]), axis=0)
    # absorb float rounding so that an exact tie stays a tie
    return (mean >= threshold - 1e-12).astype(np.uint8)


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def pred_empty(self) -> bool:
        return self.tp + self.fp == 0

    @property
    def gt_empty(self) -> bool:
        return self.tp + self.fn == 0


def confusion(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    _check_same_shape(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int, counts: ConfusionCounts) -> float:
    if den == 0:
        # both masks empty -> perfect, exactly one empty -> worst
        return 1.0 if counts.pred_empty and counts.gt_empty else 0.0
    return num / den


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, c)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, c)


def dice_score(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, c)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty image")
    return (c.tp + c.tn) / c.total


def cldice_metric(pred, gt, iterations: int = 10) -> float:
    """Harmonic mean of skeleton precision (pred skeleton in gt) and sensitivity."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    _check_same_shape(pred, gt)
    if not pred.any() and not gt.any():
        return 1.0
    with torch.no_grad():
        sp = soft_skeletonize(torch.from_numpy(pred.astype(np.float32)), iterations).numpy() > 0.5
        sg = soft_skeletonize(torch.from_numpy(gt.astype(np.float32)), iterations).numpy() > 0.5
    if not sp.any() and not sg.any():
        # too few iterations to thin either mask: fall back to plain overlap
        return dice_score(confusion(pred, gt))
    if not sp.any() or not sg.any():
        return 0.0
    tprec = np.count_nonzero(sp & gt) / np.count_nonzero(sp)
    tsens = np.count_nonzero(sg & pred) / np.count_nonzero(sg)
    if tprec + tsens == 0:
        return 0.0
    return float(2 * tprec * tsens / (tprec + tsens))


METRIC_NAMES = ("precision", "recall", "dice", "accuracy", "cldice")


def all_metrics(pred, gt, iterations: int = 10) -> dict[str, float]:
    c = confusion(pred, gt)
    return {
        "precision": precision(c),
        "recall": recall(c),
        "dice": dice_score(c),
        "accuracy": accuracy(c),
        "cldice": cldice_metric(pred, gt, iterations),
    }
