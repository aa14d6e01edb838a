"""Scale-invariant training examples.

A patch cut from a confident target image is upscaled to model input size and
paired with pseudo-labels transferred from the *full-image* prediction: the
cropped probability volume is resized, renormalized and argmaxed, and the
reliability filter is cropped along with it.  Training on these pairs
penalizes label flips under up-scaling.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tensor import Rect, argmax_labels, crop_resize, read_tensor, write_tensor


@dataclass
class PatchConfig:
    k: int = 4
    patch_h: int = 32
    patch_w: int = 64
    out_h: int = 64  # model input dims; default keeps the 2x zoom factor
    out_w: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("need at least one patch per image")
        if min(self.patch_h, self.patch_w) < 2:
            raise ValueError("patch sides must be >= 2")
        if self.out_h < 1 or self.out_w < 1:
            raise ValueError("output dims must be >= 1")


@dataclass
class ScaleExample:
    image: np.ndarray  # float32 (3, out_h, out_w)
    labels: np.ndarray  # uint8 (out_h, out_w) pseudo-labels
    filt: np.ndarray  # uint8 (out_h, out_w) inherited reliability filter
    source_id: str
    rect: Rect


def sample_rects(img_h: int, img_w: int, cfg: PatchConfig, rng: np.random.Generator):
    """k uniformly placed patch rects of the configured size."""
    if cfg.patch_h > img_h or cfg.patch_w > img_w:
        raise ValueError(
            f"patch {cfg.patch_h}x{cfg.patch_w} larger than image {img_h}x{img_w}"
        )
    rows = rng.integers(0, img_h - cfg.patch_h + 1, size=cfg.k)
    cols = rng.integers(0, img_w - cfg.patch_w + 1, size=cfg.k)
    return [Rect(int(r), int(c), cfg.patch_h, cfg.patch_w) for r, c in zip(rows, cols)]


def _renormalize(p: np.ndarray) -> np.ndarray:
    sums = p.sum(axis=0, keepdims=True)
    return p / np.clip(sums, 1e-12, None)


def make_example(
    x: np.ndarray,
    p_full: np.ndarray,
    f_full: np.ndarray,
    rec: Rect,
    cfg: PatchConfig,
    source_id: str = "",
) -> ScaleExample:
    """Build one example from the full-image prediction and filter."""
    if x.shape[1:] != p_full.shape[1:] or x.shape[1:] != f_full.shape:
        raise ValueError(
            f"inconsistent dims: image {x.shape}, probs {p_full.shape}, filter {f_full.shape}"
        )
    patch = crop_resize(x, rec, cfg.out_h, cfg.out_w, "bilinear")
    p_patch = _renormalize(crop_resize(p_full, rec, cfg.out_h, cfg.out_w, "bilinear"))
    labels = argmax_labels(p_patch)
    filt = crop_resize(f_full, rec, cfg.out_h, cfg.out_w, "nearest")
    return ScaleExample(
        image=np.clip(patch, 0.0, 1.0).astype(np.float32),
        labels=labels,
        filt=filt,
        source_id=source_id,
        rect=rec,
    )


def make_examples_for_image(
    x: np.ndarray,
    p_full: np.ndarray,
    f_full: np.ndarray,
    cfg: PatchConfig,
    rng: np.random.Generator,
    source_id: str = "",
):
    rects = sample_rects(x.shape[1], x.shape[2], cfg, rng)
    return [make_example(x, p_full, f_full, rec, cfg, source_id) for rec in rects]


def scale_consistency_score(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    rects: Sequence[Rect],
    cfg: PatchConfig,
) -> float:
    """Fraction of patch pixels whose prediction agrees with the transferred label.

    Diagnostic only: high on the domain the model understands, noticeably
    lower where up-scaling flips labels.
    """
    if not rects:
        return 1.0
    p_full = predict_fn(x)
    agree = 0.0
    for rec in rects:
        transferred = argmax_labels(
            _renormalize(crop_resize(p_full, rec, cfg.out_h, cfg.out_w, "bilinear"))
        )
        patch = np.clip(
            crop_resize(x, rec, cfg.out_h, cfg.out_w, "bilinear"), 0.0, 1.0
        ).astype(np.float32)
        direct = argmax_labels(predict_fn(patch))
        agree += float((direct == transferred).mean())
    return agree / len(rects)


# ---------------------------------------------------------------------------
# on-disk archive (one directory per round)
# ---------------------------------------------------------------------------

def save_examples(out_dir, image_id: str, examples: Sequence[ScaleExample], seed: int):
    """Persist the .lst triplet per example; returns index entries."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ex in enumerate(examples):
        stem = f"example_{image_id}_{i}"
        write_tensor(out_dir / f"{stem}_image.lst", ex.image)
        write_tensor(out_dir / f"{stem}_labels.lst", ex.labels)
        write_tensor(out_dir / f"{stem}_filter.lst", ex.filt)
        entries.append(
            {
                "id": image_id,
                "index": i,
                "rect": [ex.rect.r, ex.rect.c, ex.rect.h, ex.rect.w],
                "seed": seed,
                "files": {
                    "image": f"{stem}_image.lst",
                    "labels": f"{stem}_labels.lst",
                    "filter": f"{stem}_filter.lst",
                },
            }
        )
    return entries


def write_index(out_dir, entries) -> None:
    with open(Path(out_dir) / "index.json", "w", encoding="utf-8") as fh:
        json.dump({"examples": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_examples(archive_dir):
    """Read an example archive back into memory, grouped by source image id."""
    archive_dir = Path(archive_dir)
    with open(archive_dir / "index.json", encoding="utf-8") as fh:
        index = json.load(fh)
    grouped: dict = {}
    for entry in index["examples"]:
        files = entry["files"]
        ex = ScaleExample(
            image=read_tensor(archive_dir / files["image"]),
            labels=read_tensor(archive_dir / files["labels"]),
            filt=read_tensor(archive_dir / files["filter"]),
            source_id=entry["id"],
            rect=Rect(*entry["rect"]),
        )
        grouped.setdefault(entry["id"], []).append(ex)
    return grouped
