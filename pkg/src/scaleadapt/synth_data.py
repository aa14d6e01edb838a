"""Procedural paired-domain toy benchmark with exact ground truth.

Scenes are layered road-scene caricatures: sky band, road band, background
strip, then boxes ("building"), ellipses ("car") and small squares ("sign")
with sizes drawn from a log-uniform scale distribution.  The domain gap is a
per-channel photometric gain/offset, extra noise, and a shifted object-scale
distribution; geometry generation itself is domain-agnostic, so the shift is
label-preserving by construction.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import seeding
from .tensor import check_image, read_tensor, write_tensor

NUM_CLASSES = 6
CLASS_NAMES = ("background", "road", "sky", "building", "car", "sign")

_BASE_COLORS = np.array(
    [
        [0.46, 0.51, 0.56],  # background
        [0.29, 0.29, 0.31],  # road
        [0.62, 0.74, 0.90],  # sky
        [0.55, 0.38, 0.30],  # building
        [0.72, 0.16, 0.14],  # car
        [0.90, 0.78, 0.18],  # sign
    ],
    dtype=np.float64,
)


@dataclass
class DomainSpec:
    num_classes: int = NUM_CLASSES
    height: int = 64
    width: int = 128
    # expected object counts for building/car/sign; band entries are presence weights
    freq_weights: tuple = (1.0, 1.0, 1.0, 1.6, 1.1, 0.45)
    scale_range: tuple = (0.12, 0.32)  # log-uniform, fraction of image height
    gains: tuple = (1.0, 1.0, 1.0)
    offsets: tuple = (0.0, 0.0, 0.0)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"generator paints exactly {NUM_CLASSES} classes")
        if len(self.freq_weights) != self.num_classes or min(self.freq_weights) <= 0:
            raise ValueError("need one positive frequency weight per class")
        if min(self.gains) <= 0:
            raise ValueError("channel gains must be positive")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"scale range must satisfy 0 < lo <= hi < 1, got {self.scale_range}")

    def to_json_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "height": self.height,
            "width": self.width,
            "freq_weights": list(self.freq_weights),
            "scale_range": list(self.scale_range),
            "gains": list(self.gains),
            "offsets": list(self.offsets),
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, doc) -> "DomainSpec":
        return cls(
            num_classes=doc["num_classes"],
            height=doc["height"],
            width=doc["width"],
            freq_weights=tuple(doc["freq_weights"]),
            scale_range=tuple(doc["scale_range"]),
            gains=tuple(doc["gains"]),
            offsets=tuple(doc["offsets"]),
            noise_sigma=doc["noise_sigma"],
            seed=doc["seed"],
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def default_spec(domain: str, seed: int = 0, height: int = 64, width: int = 128) -> DomainSpec:
    """Shipped source/target pair; the target shifts color, noise and scale."""
    if domain == "source":
        return DomainSpec(height=height, width=width, seed=seed)
    if domain == "target":
        return DomainSpec(
            height=height,
            width=width,
            scale_range=(0.18, 0.48),
            gains=(0.50, 0.78, 1.30),
            offsets=(0.24, 0.08, -0.08),
            noise_sigma=0.05,
            seed=seed,
        )
    raise ValueError(f"unknown domain {domain!r}")


def _draw_scale(spec: DomainSpec, rng) -> float:
    lo, hi = spec.scale_range
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))) * spec.height)


def _paint(img, labels, mask, class_id, color, rng):
    jitter = rng.uniform(-0.06, 0.06, size=3)
    img[:, mask] = np.clip(color + jitter, 0.0, 1.0)[:, None]
    labels[mask] = class_id


def generate_scene(spec: DomainSpec, rng: np.random.Generator):
    """One (image, label map) pair; labels mirror the painted geometry exactly."""
    h, w = spec.height, spec.width
    img = np.zeros((3, h, w), dtype=np.float64)
    labels = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]

    sky_rows = int(round(rng.uniform(0.22, 0.38) * h))
    road_rows = int(round(rng.uniform(0.26, 0.40) * h))
    horizon = sky_rows
    road_top = h - road_rows

    _paint(img, labels, yy >= 0, 0, _BASE_COLORS[0], rng)  # background fill
    _paint(img, labels, yy < sky_rows, 2, _BASE_COLORS[2], rng)
    _paint(img, labels, yy >= road_top, 1, _BASE_COLORS[1], rng)

    n_buildings = rng.poisson(spec.freq_weights[3])
    for _ in range(n_buildings):
        size = _draw_scale(spec, rng)
        bw = max(3, int(round(size * rng.uniform(0.7, 1.8))))
        bh = max(3, int(round(size)))
        bottom = int(round(horizon + rng.uniform(0.0, 0.5) * max(road_top - horizon, 1)))
        top = max(0, bottom - bh)
        left = int(rng.integers(0, max(w - bw, 1)))
        mask = (yy >= top) & (yy < bottom) & (xx >= left) & (xx < left + bw)
        _paint(img, labels, mask, 3, _BASE_COLORS[3], rng)

    n_cars = rng.poisson(spec.freq_weights[4])
    for _ in range(n_cars):
        size = _draw_scale(spec, rng)
        ry = max(2.0, size * 0.30)
        rx = ry * rng.uniform(1.5, 2.2)
        cy = rng.uniform(min(road_top + ry * 0.3, h - 2.0), h - 1)
        cx = rng.uniform(0, w - 1)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        _paint(img, labels, mask, 4, _BASE_COLORS[4], rng)

    n_signs = rng.poisson(spec.freq_weights[5])
    for _ in range(n_signs):
        size = _draw_scale(spec, rng)
        side = max(2, int(round(size * 0.22)))
        top = int(rng.integers(max(horizon - side, 0), max(road_top - side, horizon) + 1))
        left = int(rng.integers(0, max(w - side, 1)))
        mask = (yy >= top) & (yy < top + side) & (xx >= left) & (xx < left + side)
        _paint(img, labels, mask, 5, _BASE_COLORS[5], rng)

    # photometric shift + sensor noise touch only the image, never the labels
    gains = np.asarray(spec.gains, dtype=np.float64)[:, None, None]
    offsets = np.asarray(spec.offsets, dtype=np.float64)[:, None, None]
    img = img * gains + offsets
    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), labels


@dataclass
class DatasetManifest:
    domain: str
    spec_hash: str
    items: list = field(default_factory=list)  # dicts with id/image/labels

    def to_json_dict(self) -> dict:
        return {"domain": self.domain, "spec_hash": self.spec_hash, "items": self.items}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("domain") not in ("source", "target"):
            raise ValueError(f"manifest domain must be source|target, got {doc.get('domain')!r}")
        return cls(domain=doc["domain"], spec_hash=doc["spec_hash"], items=doc["items"])


def generate_dataset(spec: DomainSpec, n: int, out_dir, domain: str) -> Path:
    """Write n scenes in .lst format plus the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    prefix = domain[0]
    for i in range(n):
        rng = seeding.stream(spec.seed, "scene", i)
        img, labels = generate_scene(spec, rng)
        image_id = f"{prefix}{i:04d}"
        img_name = f"img_{image_id}.lst"
        lab_name = f"lab_{image_id}.lst"
        write_tensor(out_dir / img_name, img)
        write_tensor(out_dir / lab_name, labels)
        items.append({"id": image_id, "image": img_name, "labels": lab_name})
    manifest = DatasetManifest(domain=domain, spec_hash=spec.spec_hash(), items=items)
    manifest_path = out_dir / "manifest.json"
    manifest.save(manifest_path)
    with open(out_dir / "spec.json", "w", encoding="utf-8") as fh:
        json.dump(spec.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


class Dataset:
    """Manifest-backed image/label access.

    `with_labels=False` physically withholds label paths, which is how the
    adaptation loop is kept incapable of touching target ground truth.
    """

    def __init__(self, manifest_path, with_labels: bool = True):
        self.manifest_path = Path(manifest_path)
        self.manifest = DatasetManifest.load(self.manifest_path)
        self.root = self.manifest_path.parent
        self.domain = self.manifest.domain
        self._items = {}
        for item in self.manifest.items:
            label_path = item.get("labels") if with_labels else None
            self._items[item["id"]] = (item["image"], label_path)
        self.ids = [item["id"] for item in self.manifest.items]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def has_labels(self) -> bool:
        return any(lab is not None for _, lab in self._items.values())

    def load_image(self, image_id: str) -> np.ndarray:
        img = read_tensor(self.root / self._items[image_id][0])
        check_image(img)
        return img

    def load_labels(self, image_id: str):
        lab = self._items[image_id][1]
        if lab is None:
            return None
        return read_tensor(self.root / lab)

    def image_dims(self):
        first = self.load_image(self.ids[0])
        return first.shape[1], first.shape[2]
