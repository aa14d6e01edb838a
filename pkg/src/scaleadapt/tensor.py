"""Dense array primitives shared by every other module.

Arrays are plain numpy ndarrays with fixed conventions:

* Image       float32 (3, H, W), values in [0, 1]
* ProbVolume  float32 (C, H, W), per-pixel simplex (class-major layout)
* LabelMap    uint8   (H, W), class ids < C, 255 = ignore
* FilterMap   uint8   (H, W), values {0, 1}
* EntropyMap  float32 (H, W), values in [0, 1]

The `.lst` on-disk format and the PGM/PPM exports live here too.
"""

from dataclasses import dataclass
import struct

import numpy as np

IGNORE_LABEL = 255

LST_MAGIC = b"LSET"
LST_VERSION = 1
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_MAX_NDIM = 8
_MAX_ELEMENTS = 1 << 40


class FormatError(ValueError):
    """Malformed `.lst` payload."""


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimsOverflowError(FormatError):
    pass


@dataclass(frozen=True)
class Rect:
    """Patch location: row/col offset plus height/width in pixels."""

    r: int
    c: int
    h: int
    w: int

    def check_within(self, host_h: int, host_w: int, min_side: int = 1) -> None:
        if self.h < min_side or self.w < min_side:
            raise ValueError(f"rect sides {self.h}x{self.w} below minimum {min_side}")
        if self.r < 0 or self.c < 0 or self.r + self.h > host_h or self.c + self.w > host_w:
            raise ValueError(
                f"rect ({self.r},{self.c},{self.h},{self.w}) exceeds host {host_h}x{host_w}"
            )


# ---------------------------------------------------------------------------
# validation helpers
# ---------------------------------------------------------------------------

def check_image(x: np.ndarray) -> None:
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"image must be (3, H, W), got {x.shape}")
    if x.dtype != np.float32:
        raise ValueError(f"image dtype must be float32, got {x.dtype}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")


def check_prob_volume(p: np.ndarray, tol: float = 1e-5) -> None:
    if p.ndim != 3:
        raise ValueError(f"prob volume must be (C, H, W), got {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0 + tol):
        raise ValueError("probabilities must lie in [0, 1]")
    sums = p.sum(axis=0, dtype=np.float64)
    if p.size and np.abs(sums - 1.0).max() > tol:
        raise ValueError("per-pixel probabilities must sum to 1")


def check_label_map(y: np.ndarray, num_classes: int) -> None:
    if y.ndim != 2 or y.dtype != np.uint8:
        raise ValueError(f"label map must be uint8 (H, W), got {y.dtype} {y.shape}")
    bad = y[(y != IGNORE_LABEL) & (y >= num_classes)]
    if bad.size:
        raise ValueError(f"label map contains class id {int(bad[0])} >= C={num_classes}")


def check_filter_map(f: np.ndarray) -> None:
    if f.ndim != 2 or f.dtype != np.uint8:
        raise ValueError(f"filter map must be uint8 (H, W), got {f.dtype} {f.shape}")
    if f.size and not np.isin(f, (0, 1)).all():
        raise ValueError("filter map must be binary")


# ---------------------------------------------------------------------------
# softmax / argmax
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the class axis of a (C, H, W) volume.

    Uses max-subtraction so arbitrarily large finite logits cannot overflow.
    The result keeps the floating dtype of the input (float64 input is the
    double-precision compute mode used by gradient checks).
    """
    if logits.ndim != 3:
        raise ValueError(f"logits must be (C, H, W), got {logits.shape}")
    if not np.isfinite(logits).all():
        c, i, j = np.argwhere(~np.isfinite(logits))[0]
        raise ValueError(f"non-finite logit at class {c}, pixel ({i}, {j})")
    dtype = np.float64 if logits.dtype == np.float64 else np.float32
    z = logits.astype(dtype, copy=True)
    z -= z.max(axis=0, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=0, keepdims=True)
    return z


def argmax_labels(p: np.ndarray) -> np.ndarray:
    """Per-pixel most probable class; ties resolve to the lowest class index."""
    return p.argmax(axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# crop + resize (the patch operator)
# ---------------------------------------------------------------------------

def _nearest_index(n_src: int, n_out: int) -> np.ndarray:
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_src / n_out)
    return np.clip(np.floor(centers).astype(np.int64), 0, n_src - 1)


def _bilinear_axis(n_src: int, n_out: int):
    # half-pixel centers (align-corners=false), clamped at the edges
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_src / n_out) - 0.5
    lo = np.floor(x).astype(np.int64)
    frac = x - lo
    lo0 = np.clip(lo, 0, n_src - 1)
    lo1 = np.clip(lo + 1, 0, n_src - 1)
    return lo0, lo1, frac


def crop_resize(t: np.ndarray, rec: Rect, out_h: int, out_w: int, mode: str) -> np.ndarray:
    """Extract `rec` from a (H, W) or (C, H, W) array and resize to out_h x out_w.

    nearest replicates source indices exactly; bilinear samples half-pixel
    centers with clamped edges, so every output value is a convex combination
    of values inside the rect.
    """
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resize mode {mode!r}")
    if t.ndim not in (2, 3):
        raise ValueError(f"expected (H, W) or (C, H, W) array, got shape {t.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be >= 1")
    squeeze = t.ndim == 2
    vol = t[None] if squeeze else t
    rec.check_within(vol.shape[1], vol.shape[2])
    region = vol[:, rec.r : rec.r + rec.h, rec.c : rec.c + rec.w]

    if mode == "nearest":
        iy = _nearest_index(rec.h, out_h)
        ix = _nearest_index(rec.w, out_w)
        out = region[:, iy][:, :, ix]
        out = np.ascontiguousarray(out)
    else:
        y0, y1, fy = _bilinear_axis(rec.h, out_h)
        x0, x1, fx = _bilinear_axis(rec.w, out_w)
        reg = region.astype(np.float64)
        top = reg[:, y0][:, :, x0] * (1.0 - fx) + reg[:, y0][:, :, x1] * fx
        bot = reg[:, y1][:, :, x0] * (1.0 - fx) + reg[:, y1][:, :, x1] * fx
        out = top * (1.0 - fy[:, None]) + bot * fy[:, None]
        if t.dtype == np.uint8:
            out = np.floor(out + 0.5).astype(np.uint8)
        else:
            out = out.astype(t.dtype)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# .lst tensor format
# ---------------------------------------------------------------------------

def tensor_to_bytes(t: np.ndarray) -> bytes:
    dt = np.dtype(t.dtype)
    if dt not in _DTYPE_TO_CODE:
        raise ValueError(f"unsupported dtype {t.dtype} (float32 or uint8 only)")
    if t.ndim == 0 or t.ndim > _MAX_NDIM:
        raise ValueError(f"ndim must be in [1, {_MAX_NDIM}], got {t.ndim}")
    if any(d < 1 or d > 0xFFFFFFFF for d in t.shape):
        raise ValueError(f"extents must fit u32 and be >= 1, got {t.shape}")
    arr = np.ascontiguousarray(t)
    if arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    head = LST_MAGIC + struct.pack("<HBB", LST_VERSION, _DTYPE_TO_CODE[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def write_tensor(path, t: np.ndarray) -> None:
    """Serialize a float32/uint8 array; round-trips bit-exactly."""
    blob = tensor_to_bytes(t)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return tensor_from_bytes(blob)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise TruncatedPayloadError(f"header needs 8 bytes, file has {len(blob)}")
    if blob[:4] != LST_MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {LST_MAGIC!r}")
    version, dcode, ndim = struct.unpack("<HBB", blob[4:8])
    if version != LST_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if dcode not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {dcode}")
    if ndim == 0 or ndim > _MAX_NDIM:
        raise FormatError(f"ndim {ndim} outside [1, {_MAX_NDIM}]")
    need = 8 + 4 * ndim
    if len(blob) < need:
        raise TruncatedPayloadError("dims table truncated")
    dims = struct.unpack(f"<{ndim}I", blob[8:need])
    if any(d == 0 for d in dims):
        raise FormatError(f"zero extent in dims {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise DimsOverflowError(f"dims {dims} exceed element cap {_MAX_ELEMENTS}")
    dtype = _CODE_TO_DTYPE[dcode]
    expected = need + count * dtype.itemsize
    if len(blob) != expected:
        raise TruncatedPayloadError(
            f"payload is {len(blob) - need} bytes, dims {dims} require {count * dtype.itemsize}"
        )
    data = np.frombuffer(blob[need:], dtype=dtype).reshape(dims)
    if dtype == np.dtype("<f4"):
        data = data.astype(np.float32, copy=True)
    else:
        data = data.copy()
    return data


# ---------------------------------------------------------------------------
# human-viewable exports
# ---------------------------------------------------------------------------

def _to_u8(a: np.ndarray) -> np.ndarray:
    if a.dtype == np.uint8:
        return a
    scaled = np.clip(a.astype(np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)  # round half-up


def write_pgm(path, a: np.ndarray) -> None:
    """8-bit binary PGM for a single-channel (H, W) map."""
    if a.ndim != 2:
        raise ValueError(f"PGM export needs a 2-d array, got {a.shape}")
    data = _to_u8(a)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """8-bit binary PPM for a (3, H, W) image."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM export needs a (3, H, W) array, got {img.shape}")
    data = _to_u8(img).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())
