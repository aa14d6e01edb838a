"""Training objectives with analytic gradients w.r.t. the logits.

All losses assume the probability volume is the softmax of the logits the
gradient is reported against.  Reductions follow the pixel-sum convention;
the trainer optionally divides by the contributing pixel count per batch.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import IGNORE_LABEL

LOG_CLAMP = 1e-12


@dataclass
class LossConfig:
    gamma: float = 3.0
    beta: float = 0.1
    focal_masked: bool = False  # Eq.-faithful default: no filter inside the focal term
    reduction: str = "sum"

    def __post_init__(self):
        if self.gamma < 0.0:
            raise ValueError(f"focal exponent must be >= 0, got {self.gamma}")
        if self.beta < 0.0:
            raise ValueError(f"focal weight must be >= 0, got {self.beta}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass
class LossValue:
    loss: float
    grad: np.ndarray  # same shape as the logits the loss was computed from
    count: int  # contributing pixels; zero-gradient elsewhere

    def scaled(self, factor: float) -> "LossValue":
        return LossValue(loss=self.loss * factor, grad=self.grad * factor, count=self.count)


@dataclass
class AdaptationLossValue(LossValue):
    ce_part: float = 0.0  # unscaled filtered-CE sum
    fl_part: float = 0.0  # unscaled focal sum (before the beta weight)


def _check_targets(p: np.ndarray, y: np.ndarray) -> None:
    if p.ndim != 3 or y.shape != p.shape[1:]:
        raise ValueError(f"shape mismatch: probs {p.shape} vs labels {y.shape}")
    num_classes = p.shape[0]
    bad = y[(y != IGNORE_LABEL) & (y >= num_classes)]
    if bad.size:
        raise ValueError(f"label {int(bad[0])} out of range for C={num_classes}")


def _gather_true(p: np.ndarray, y: np.ndarray, mask: np.ndarray) -> np.ndarray:
    idx = np.where(mask, y, 0).astype(np.int64)
    return np.take_along_axis(p, idx[None], axis=0)[0]


def _apply_reduction(lv: LossValue, reduction: str) -> LossValue:
    if reduction == "mean" and lv.count > 0:
        return lv.scaled(1.0 / lv.count)
    return lv


def ce_loss(p: np.ndarray, y: np.ndarray, reduction: str = "sum") -> LossValue:
    """Cross-entropy over non-ignore pixels; grad w.r.t. logits is p - onehot."""
    return _masked_ce(p, y, None, reduction)


def filtered_ce_loss(
    p: np.ndarray, y: np.ndarray, filt: np.ndarray, reduction: str = "sum"
) -> LossValue:
    """Cross-entropy restricted to pixels the reliability filter kept."""
    if filt.shape != y.shape:
        raise ValueError(f"filter shape {filt.shape} does not match labels {y.shape}")
    return _masked_ce(p, y, filt != 0, reduction)


def _true_class_flat_index(y: np.ndarray, mask: np.ndarray, width: int):
    rows, cols = np.nonzero(mask)
    return y[mask].astype(np.int64), rows * width + cols


def _masked_ce(p, y, extra_mask, reduction) -> LossValue:
    _check_targets(p, y)
    mask = y != IGNORE_LABEL
    if extra_mask is not None:
        mask &= extra_mask
    dtype = np.float64 if p.dtype == np.float64 else np.float32
    count = int(mask.sum())
    grad = np.zeros_like(p, dtype=dtype)
    if count == 0:
        return LossValue(loss=0.0, grad=grad, count=0)
    pt = _gather_true(p, y, mask)[mask].astype(np.float64)
    loss = -float(np.log(np.clip(pt, LOG_CLAMP, None)).sum(dtype=np.float64))
    grad += np.where(mask, p, 0.0).astype(dtype)
    cidx, lin = _true_class_flat_index(y, mask, p.shape[2])
    flat = grad.reshape(grad.shape[0], -1)
    flat[cidx, lin] -= 1.0  # one update per pixel, indices unique
    return _apply_reduction(LossValue(loss=loss, grad=grad, count=count), reduction)


def focal_loss(
    p: np.ndarray,
    y: np.ndarray,
    filt: np.ndarray,
    cfg: LossConfig,
) -> LossValue:
    """Focal loss -log(p_t) (1 - p_t)^gamma at the target class of each pixel.

    The filter only applies when cfg.focal_masked is set.  The gradient runs
    through the softmax: with g = dL/dp_t, dL/dz_j = g * p_t * (delta_tj - p_j).
    """
    _check_targets(p, y)
    mask = y != IGNORE_LABEL
    if cfg.focal_masked:
        if filt.shape != y.shape:
            raise ValueError(f"filter shape {filt.shape} does not match labels {y.shape}")
        mask &= filt != 0
    dtype = np.float64 if p.dtype == np.float64 else np.float32
    count = int(mask.sum())
    grad = np.zeros_like(p, dtype=dtype)
    if count == 0:
        return LossValue(loss=0.0, grad=grad, count=0)

    pt = _gather_true(p, y, mask).astype(np.float64)
    pt_safe = np.clip(pt, LOG_CLAMP, None)
    log_pt = np.log(pt_safe)
    one_m = np.clip(1.0 - pt, 0.0, None)
    pow_g = one_m**cfg.gamma
    per_pixel = -log_pt * pow_g
    loss = float(per_pixel[mask].sum(dtype=np.float64))

    # dL/dp_t; the gamma * log * (1-p)^(gamma-1) term vanishes with gamma=0
    # and at p_t=1, where the power would otherwise produce inf * 0.
    dldpt = -pow_g / pt_safe
    if cfg.gamma > 0.0:
        pow_gm1 = np.where(one_m > 0.0, np.clip(one_m, LOG_CLAMP, None) ** (cfg.gamma - 1.0), 0.0)
        dldpt = dldpt + cfg.gamma * log_pt * pow_gm1
    coeff = np.where(mask, dldpt * pt, 0.0)  # g * p_t

    grad -= (coeff[None] * p.astype(np.float64)).astype(dtype)
    cidx, lin = _true_class_flat_index(y, mask, p.shape[2])
    flat = grad.reshape(grad.shape[0], -1)
    flat[cidx, lin] += coeff[mask].astype(dtype)
    return _apply_reduction(LossValue(loss=loss, grad=grad, count=count), cfg.reduction)


def adaptation_loss(examples, probs: np.ndarray, cfg: LossConfig) -> LossValue:
    """Patch-set objective: sum over examples of filtered CE + beta * focal.

    `probs` stacks the model outputs for every example, (k, C, H, W); the
    returned gradient has the same shape.  The source cross-entropy term of
    the full objective is composed by the training loop, not here.
    """
    if len(examples) != len(probs):
        raise ValueError(f"{len(examples)} examples but {len(probs)} output volumes")
    if not examples:
        warnings.warn("adaptation loss over an empty example list", stacklevel=2)
        return AdaptationLossValue(loss=0.0, grad=np.zeros((0,)), count=0)
    dtype = np.float64 if probs.dtype == np.float64 else np.float32
    grads = np.zeros_like(probs, dtype=dtype)
    ce_part = 0.0
    fl_part = 0.0
    count = 0
    inner = LossConfig(
        gamma=cfg.gamma, beta=cfg.beta, focal_masked=cfg.focal_masked, reduction="sum"
    )
    for i, ex in enumerate(examples):
        ce = filtered_ce_loss(probs[i], ex.labels, ex.filt, reduction="sum")
        ce_part += ce.loss
        grads[i] += ce.grad
        count += ce.count
        if cfg.beta > 0.0:
            fl = focal_loss(probs[i], ex.labels, ex.filt, inner)
            fl_part += fl.loss
            grads[i] += cfg.beta * fl.grad
            count += fl.count
    out = AdaptationLossValue(
        loss=ce_part + cfg.beta * fl_part,
        grad=grads,
        count=count,
        ce_part=ce_part,
        fl_part=fl_part,
    )
    if cfg.reduction == "mean" and count > 0:
        out.loss /= count
        out.grad = out.grad / count
    return out
