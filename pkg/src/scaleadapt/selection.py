"""Class-based confident image selection and dynamic threshold extraction.

Per round, every target image is scored once per class it predicts: the mean
of the per-pixel max probability over pixels argmaxed to that class.  Each
class then contributes the top p/C portion of its descending-sorted list to
the confident subset, and the class's entropy threshold is calibrated on the
last image that made the cut (the boundary image).
"""

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .entropy import ThresholdVector, self_entropy
from .tensor import argmax_labels


@dataclass
class SelectionConfig:
    p0: float = 0.1
    dp: float = 0.05
    num_classes: int = 6
    round_index: int = 0

    def __post_init__(self):
        if not (0.0 < self.p0 <= 1.0):
            raise ValueError(f"initial portion must be in (0, 1], got {self.p0}")
        if self.dp < 0.0:
            raise ValueError(f"portion increment must be >= 0, got {self.dp}")
        if self.num_classes < 1:
            raise ValueError("need at least one class")


def round_portion(cfg: SelectionConfig) -> float:
    """Effective selection portion for the configured round, clamped to 1."""
    if cfg.round_index < 0:
        raise ValueError(f"round index must be >= 0, got {cfg.round_index}")
    return min(cfg.p0 + cfg.round_index * cfg.dp, 1.0)


def score_image(p: np.ndarray):
    """Per-class confidence of one image.

    Returns (u, present): u[c] is the mean max-probability over pixels whose
    argmax is c (float64, exact for float32 inputs), present[c] marks classes
    that occur in the argmax map at all.  u is undefined (0) where absent.
    """
    num_classes = p.shape[0]
    labels = argmax_labels(p)
    max_prob = p.max(axis=0)
    u = np.zeros(num_classes, dtype=np.float64)
    present = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        mask = labels == c
        n = int(mask.sum())
        if n:
            present[c] = True
            u[c] = max_prob[mask].sum(dtype=np.float64) / n
    return u, present


@dataclass
class ClassConfidenceTable:
    """Confidence of every target image with respect to every class."""

    ids: list
    confidence: np.ndarray  # (n_images, C) float64
    present: np.ndarray  # (n_images, C) bool

    @property
    def num_classes(self) -> int:
        return self.confidence.shape[1]


def build_confidence_table(
    ids: Sequence[str],
    prob_lookup: Callable[[str], np.ndarray],
    num_classes: int,
    map_fn=map,
) -> ClassConfidenceTable:
    """Score all images; `map_fn` may be a parallel map, output is id-ordered."""
    ids = list(ids)
    conf = np.zeros((len(ids), num_classes), dtype=np.float64)
    pres = np.zeros((len(ids), num_classes), dtype=bool)
    for i, (u, present) in enumerate(map_fn(lambda im: score_image(prob_lookup(im)), ids)):
        conf[i] = u
        pres[i] = present
    return ClassConfidenceTable(ids=ids, confidence=conf, present=pres)


@dataclass
class ClassSelection:
    """Intermediate result of the sort/slice step, before thresholding."""

    portion: float
    per_class_sorted: list  # per class: image ids sorted by confidence desc
    len_th: np.ndarray  # (C,) int, 0 where the class never occurs
    selected: list = field(default_factory=list)  # deduplicated union


def select_confident(table: ClassConfidenceTable, cfg: SelectionConfig) -> ClassSelection:
    """Sort each class's images by confidence and keep the top p/C portion.

    Slice length is ceil(n_c * p / C) floored at 1 so rare classes always
    stay represented.  Ties sort by ascending image id; the union keeps
    first-selection order (class 0 first).
    """
    if not table.ids:
        raise ValueError("empty target set: nothing to select from")
    if table.num_classes != cfg.num_classes:
        raise ValueError(
            f"table has {table.num_classes} classes, config expects {cfg.num_classes}"
        )
    p_eff = round_portion(cfg)
    per_class_sorted = []
    len_th = np.zeros(cfg.num_classes, dtype=np.int64)
    selected = []
    seen = set()
    for c in range(cfg.num_classes):
        rows = [i for i in range(len(table.ids)) if table.present[i, c]]
        rows.sort(key=lambda i: (-table.confidence[i, c], table.ids[i]))
        ordered = [table.ids[i] for i in rows]
        per_class_sorted.append(ordered)
        if not ordered:
            continue
        take = max(1, math.ceil(len(ordered) * p_eff / cfg.num_classes))
        take = min(take, len(ordered))
        len_th[c] = take
        for image_id in ordered[:take]:
            if image_id not in seen:
                seen.add(image_id)
                selected.append(image_id)
    return ClassSelection(
        portion=p_eff, per_class_sorted=per_class_sorted, len_th=len_th, selected=selected
    )


def extract_thresholds(
    sel: ClassSelection,
    prob_lookup: Callable[[str], np.ndarray],
    num_classes: int,
) -> ThresholdVector:
    """Per-class entropy cutoff from each class's boundary (last kept) image.

    h_c is the mean normalized entropy over the boundary image's pixels whose
    argmax is c.  A class with no sorted list, or whose boundary image holds
    no class-c pixels, is flagged invalid; the filter applies the fallback.
    """
    values = np.zeros(num_classes, dtype=np.float32)
    valid = np.zeros(num_classes, dtype=bool)
    cache = {}
    for c in range(num_classes):
        if sel.len_th[c] == 0:
            continue
        boundary_id = sel.per_class_sorted[c][int(sel.len_th[c]) - 1]
        if boundary_id not in cache:
            p = prob_lookup(boundary_id)
            if p is None:
                raise ValueError(f"missing probability volume for boundary image {boundary_id!r}")
            cache[boundary_id] = (argmax_labels(p), self_entropy(p))
        labels, ent = cache[boundary_id]
        mask = labels == c
        if mask.any():
            values[c] = np.float32(ent[mask].mean(dtype=np.float64))
            valid[c] = True
    return ThresholdVector(values=values, valid=valid)


@dataclass
class SelectionResult:
    """One round's selection output plus the per-class selection histogram."""

    round_index: int
    portion: float
    selected: list
    thresholds: ThresholdVector
    counts: np.ndarray  # (C,) pre-dedup selected count per class

    def to_json_dict(self) -> dict:
        per_class = {}
        for c in range(len(self.counts)):
            h = float(self.thresholds.values[c]) if self.thresholds.valid[c] else None
            per_class[str(c)] = {"count": int(self.counts[c]), "h": h}
        return {
            "round": self.round_index,
            "p": self.portion,
            "selected": list(self.selected),
            "per_class": per_class,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SelectionResult":
        classes = sorted(doc["per_class"], key=int)
        counts = np.array([doc["per_class"][c]["count"] for c in classes], dtype=np.int64)
        values = np.zeros(len(classes), dtype=np.float32)
        valid = np.zeros(len(classes), dtype=bool)
        for c in classes:
            h = doc["per_class"][c]["h"]
            if h is not None:
                values[int(c)] = h
                valid[int(c)] = True
        return cls(
            round_index=doc["round"],
            portion=doc["p"],
            selected=list(doc["selected"]),
            thresholds=ThresholdVector(values=values, valid=valid),
            counts=counts,
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SelectionResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


def run_selection(
    ids: Sequence[str],
    prob_lookup: Callable[[str], np.ndarray],
    cfg: SelectionConfig,
    map_fn=map,
    threshold_override: Optional[float] = None,
) -> SelectionResult:
    """Full round: score every image, select, and calibrate thresholds."""
    table = build_confidence_table(ids, prob_lookup, cfg.num_classes, map_fn=map_fn)
    sel = select_confident(table, cfg)
    if threshold_override is None:
        thresholds = extract_thresholds(sel, prob_lookup, cfg.num_classes)
    else:
        thresholds = ThresholdVector(
            values=np.full(cfg.num_classes, threshold_override, dtype=np.float32),
            valid=np.ones(cfg.num_classes, dtype=bool),
        )
    return SelectionResult(
        round_index=cfg.round_index,
        portion=sel.portion,
        selected=sel.selected,
        thresholds=thresholds,
        counts=sel.len_th.copy(),
    )
