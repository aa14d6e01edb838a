"""Normalized self-entropy maps and the class-conditional reliability filter.

A pixel's prediction is kept for self-training when its entropy does not
exceed the dynamic threshold of its predicted class; classes never seen
during threshold calibration fall back to a neutral default.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import argmax_labels

FALLBACK_THRESHOLD = 0.5


@dataclass
class ThresholdVector:
    """Per-class entropy cutoffs h_c with a validity flag per class.

    Invalid entries mean the class had no calibration pixels this round.
    """

    values: np.ndarray  # (C,) float32
    valid: np.ndarray  # (C,) bool

    @classmethod
    def from_lists(cls, values, valid) -> "ThresholdVector":
        return cls(np.asarray(values, dtype=np.float32), np.asarray(valid, dtype=bool))

    @property
    def num_classes(self) -> int:
        return len(self.values)

    def resolved(self) -> np.ndarray:
        """Thresholds with the fallback substituted for invalid classes.

        Fallback is the mean of the valid thresholds, or 0.5 when no class
        calibrated at all: a neutral default that neither accepts nor rejects
        an unseen class wholesale.
        """
        out = self.values.astype(np.float32, copy=True)
        if not self.valid.all():
            fallback = self.values[self.valid].mean() if self.valid.any() else FALLBACK_THRESHOLD
            out[~self.valid] = np.float32(fallback)
        return out


def self_entropy(p: np.ndarray) -> np.ndarray:
    """Normalized Shannon self-entropy per pixel: -sum_c p ln p / ln C.

    0 * ln 0 counts as 0; the ln C normalizer puts the uniform pixel at
    exactly 1 and any one-hot pixel at 0.
    """
    if p.ndim != 3:
        raise ValueError(f"prob volume must be (C, H, W), got {p.shape}")
    num_classes = p.shape[0]
    if num_classes < 2:
        raise ValueError(f"entropy needs C >= 2 classes, got C={num_classes}")
    q = p.astype(np.float64, copy=False)
    terms = np.where(q > 0.0, q * np.log(np.maximum(q, np.finfo(np.float64).tiny)), 0.0)
    ent = -terms.sum(axis=0) / np.log(num_classes)
    return np.clip(ent, 0.0, 1.0).astype(np.float32)


def filter_map(p: np.ndarray, e: np.ndarray, thresholds: ThresholdVector) -> np.ndarray:
    """Binary reliability mask: 1 where entropy <= threshold of the argmax class."""
    if p.ndim != 3 or e.ndim != 2 or p.shape[1:] != e.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs entropy {e.shape}")
    if thresholds.num_classes != p.shape[0]:
        raise ValueError(
            f"threshold vector has {thresholds.num_classes} classes, volume has {p.shape[0]}"
        )
    labels = argmax_labels(p)
    cutoff = thresholds.resolved()[labels]
    return (e <= cutoff).astype(np.uint8)
