"""Toy segmentation network: conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1.

Forward and backward are written out by hand (im2col + GEMM, NHWC inside)
so gradients can be validated against finite differences.  A float64 compute
mode mirrors the exact same arithmetic for those checks.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import softmax, tensor_from_bytes, tensor_to_bytes

HIDDEN = 16
LSEC_MAGIC = b"LSEC"
LSEC_VERSION = 1

PARAM_BLOCKS = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")


@dataclass
class ModelParams:
    conv1_w: np.ndarray  # (16, 3, 3, 3)   out, in, kh, kw
    conv1_b: np.ndarray  # (16,)
    conv2_w: np.ndarray  # (16, 16, 3, 3)
    conv2_b: np.ndarray  # (16,)
    head_w: np.ndarray  # (C, 16)
    head_b: np.ndarray  # (C,)

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[0]

    def blocks(self):
        for name in PARAM_BLOCKS:
            yield name, getattr(self, name)

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.blocks()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(**{name: arr.astype(dtype) for name, arr in self.blocks()})


def init_params(num_classes: int, rng: np.random.Generator) -> ModelParams:
    """He-uniform fan-in init for the kernels, zero biases."""

    def he(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)

    return ModelParams(
        conv1_w=he((HIDDEN, 3, 3, 3), 3 * 9),
        conv1_b=np.zeros(HIDDEN, dtype=np.float32),
        conv2_w=he((HIDDEN, HIDDEN, 3, 3), HIDDEN * 9),
        conv2_b=np.zeros(HIDDEN, dtype=np.float32),
        head_w=he((num_classes, HIDDEN), HIDDEN),
        head_b=np.zeros(num_classes, dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# conv plumbing (NHWC)
# ---------------------------------------------------------------------------

def _get_buf(scratch: Optional[dict], key, shape, dtype):
    if scratch is None:
        return np.empty(shape, dtype=dtype)
    buf = scratch.get(key)
    if buf is None or buf.shape != shape or buf.dtype != dtype:
        buf = np.empty(shape, dtype=dtype)
        scratch[key] = buf
    return buf


def _im2col(x: np.ndarray, scratch, key) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9*C) columns of the zero-padded 3x3 windows."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    buf = _get_buf(scratch, key, (n, h, w, 9, c), x.dtype)
    for u in range(3):
        for v in range(3):
            buf[:, :, :, 3 * u + v, :] = xp[:, u : u + h, v : v + w, :]
    return buf.reshape(n * h * w, 9 * c)


def _kernel_matrix(k: np.ndarray, dtype) -> np.ndarray:
    # (F, C, 3, 3) -> (9*C, F) matching the (u, v, c) column order of _im2col
    return np.ascontiguousarray(k.transpose(2, 3, 1, 0).reshape(-1, k.shape[0])).astype(
        dtype, copy=False
    )


def _kernel_from_matrix(m: np.ndarray, c_in: int) -> np.ndarray:
    return np.ascontiguousarray(m.reshape(3, 3, c_in, -1).transpose(3, 2, 0, 1))


@dataclass
class ForwardCache:
    shape: tuple  # (N, H, W)
    dtype: np.dtype
    x_nhwc: np.ndarray
    cols1: np.ndarray
    mask1: np.ndarray
    cols2: np.ndarray
    mask2: np.ndarray
    r2: np.ndarray  # (N*H*W, HIDDEN) post-ReLU features
    params: "ModelParams" = field(repr=False, default=None)


def forward_batch(
    params: ModelParams,
    x: np.ndarray,
    dtype=np.float32,
    scratch: Optional[dict] = None,
):
    """Run the net on a (N, 3, H, W) batch; returns (logits (N, C, H, W), cache)."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected batch (N, 3, H, W), got {x.shape}")
    n, _, h, w = x.shape
    dtype = np.dtype(dtype)
    x_nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).astype(dtype, copy=False)

    cols1 = _im2col(x_nhwc, scratch, "cols1")
    a1 = cols1 @ _kernel_matrix(params.conv1_w, dtype)
    a1 += params.conv1_b.astype(dtype)
    mask1 = a1 > 0
    r1 = np.where(mask1, a1, dtype.type(0)).reshape(n, h, w, HIDDEN)

    cols2 = _im2col(r1, scratch, "cols2")
    a2 = cols2 @ _kernel_matrix(params.conv2_w, dtype)
    a2 += params.conv2_b.astype(dtype)
    mask2 = a2 > 0
    r2 = np.where(mask2, a2, dtype.type(0))

    logits_flat = r2 @ params.head_w.T.astype(dtype)
    logits_flat += params.head_b.astype(dtype)
    num_classes = params.num_classes
    logits = np.ascontiguousarray(
        logits_flat.reshape(n, h, w, num_classes).transpose(0, 3, 1, 2)
    )
    cache = ForwardCache(
        shape=(n, h, w),
        dtype=dtype,
        x_nhwc=x_nhwc,
        cols1=cols1,
        mask1=mask1,
        cols2=cols2,
        mask2=mask2,
        r2=r2,
        params=params,
    )
    return logits, cache


def forward(params: ModelParams, x: np.ndarray, dtype=np.float32):
    """Single-image forward: (3, H, W) -> ((C, H, W) logits, cache)."""
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected image (3, H, W), got {x.shape}")
    logits, cache = forward_batch(params, x[None], dtype=dtype)
    return logits[0], cache


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, x)
    return softmax(logits)


def backward(cache: ForwardCache, grad_logits: np.ndarray, scratch: Optional[dict] = None):
    """Exact reverse-mode gradients of sum(logits * grad_logits) w.r.t. params.

    grad_logits must match the forward's logits layout, (N, C, H, W) (or
    (C, H, W) for a single-image forward).
    """
    n, h, w = cache.shape
    if grad_logits.ndim == 3:
        grad_logits = grad_logits[None]
    params = cache.params
    num_classes = params.num_classes
    if grad_logits.shape != (n, num_classes, h, w):
        raise ValueError(
            f"grad shape {grad_logits.shape} does not match cached forward "
            f"{(n, num_classes, h, w)}"
        )
    dtype = cache.dtype
    g = np.ascontiguousarray(grad_logits.transpose(0, 2, 3, 1)).astype(dtype, copy=False)
    g_flat = g.reshape(n * h * w, num_classes)

    hw = h * w

    def _bias_sum(flat, channels):
        # reduce per image first, then accumulate across the batch: appending
        # zero-gradient items to a batch must not regroup the summation tree
        per_image = flat.reshape(n, hw, channels).sum(axis=1)
        return np.add.reduce(per_image, axis=0)

    def _weight_sum(lhs, rhs):
        # per-image GEMMs accumulated in batch order, for the same reason
        out = lhs[:hw].T @ rhs[:hw]
        for i in range(1, n):
            out += lhs[i * hw : (i + 1) * hw].T @ rhs[i * hw : (i + 1) * hw]
        return out

    d_head_w = _weight_sum(g_flat, cache.r2)
    d_head_b = _bias_sum(g_flat, num_classes)

    dr2 = g_flat @ params.head_w.astype(dtype)
    dr2 *= cache.mask2

    d_k2_mat = _weight_sum(cache.cols2, dr2)
    d_conv2_b = _bias_sum(dr2, HIDDEN)

    # grad w.r.t. conv2 input: same-pad conv of dr2 with the flipped kernel,
    # output channels swapped to input channels
    k2_rot = params.conv2_w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    cols_g2 = _im2col(dr2.reshape(n, h, w, HIDDEN), scratch, "cols_g2")
    dr1 = cols_g2 @ _kernel_matrix(k2_rot, dtype)
    dr1 *= cache.mask1

    d_k1_mat = _weight_sum(cache.cols1, dr1)
    d_conv1_b = _bias_sum(dr1, HIDDEN)

    return ModelParams(
        conv1_w=_kernel_from_matrix(d_k1_mat, 3),
        conv1_b=d_conv1_b,
        conv2_w=_kernel_from_matrix(d_k2_mat, HIDDEN),
        conv2_b=d_conv2_b,
        head_w=d_head_w,
        head_b=d_head_b,
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3  # toy-scale default; see config for the reference value
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0)
        for name, arr in params.blocks():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState) -> None:
    """Bias-corrected Adam update, in place on params and state."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for name, w in params.blocks():
        g = getattr(grads, name)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter block {name!r}")
        g = g.astype(w.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / correction1
        v_hat = v / correction2
        w -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# .lsec checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, state: Optional[AdamState] = None, extra=None):
    """Container: magic, u32 header length, JSON header, concatenated .lst blocks."""
    blocks = []
    for name, arr in params.blocks():
        blocks.append((name, arr))
    if state is not None:
        for name in PARAM_BLOCKS:
            blocks.append((f"adam.m.{name}", state.m[name]))
            blocks.append((f"adam.v.{name}", state.v[name]))
    header = {
        "format": "lsec",
        "version": LSEC_VERSION,
        "blocks": [name for name, _ in blocks],
        "dims": {name: list(arr.shape) for name, arr in blocks},
        "optimizer": None
        if state is None
        else {
            "lr": state.lr,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "step": state.t,
        },
        "num_classes": params.num_classes,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(LSEC_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for _, arr in blocks:
            fh.write(tensor_to_bytes(arr))


def load_checkpoint(path):
    """Returns (params, adam state or None, extra metadata dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LSEC_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != LSEC_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        rest = fh.read()
    arrays = {}
    offset = 0
    for name in header["blocks"]:
        dims = header["dims"][name]
        # peek the dtype code to size this block
        dcode = rest[offset + 6]
        itemsize = 4 if dcode == 0 else 1
        count = int(np.prod(dims, dtype=np.int64))
        size = 8 + 4 * len(dims) + count * itemsize
        arrays[name] = tensor_from_bytes(rest[offset : offset + size])
        offset += size
    params = ModelParams(**{name: arrays[name] for name in PARAM_BLOCKS})
    state = None
    opt = header.get("optimizer")
    if opt is not None:
        state = AdamState(
            lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"], t=opt["step"]
        )
        for name in PARAM_BLOCKS:
            state.m[name] = arrays[f"adam.m.{name}"]
            state.v[name] = arrays[f"adam.v.{name}"]
    return params, state, header.get("extra", {})
