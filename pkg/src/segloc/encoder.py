"""Small convolutional encoder with RoIAlign pooling and hand-derived gradients.

Architecture (no normalization layers, all float64)::

    conv 3->16 5x5/2 -> ReLU -> conv 16->32 3x3/2 -> ReLU -> conv 32->64 3x3/2 -> ReLU
    -> RoIAlign 3x3 over the box -> flatten (576) -> affine 576->128 -> ReLU
    -> affine 128->64 -> L2 normalize

Convolutions use "same" zero padding (``k // 2``), so every stage halves
the spatial size rounding up and the feature map has stride 8.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CheckpointError, ContractViolation, InvalidArgumentError
from .raster import BBox

STRIDE = 8
POOL = 3
EMBED_DIM = 64

# (name, out_channels, in_channels, kernel, stride)
CONV_STAGES = (
    ("conv1", 16, 3, 5, 2),
    ("conv2", 32, 16, 3, 2),
    ("conv3", 64, 32, 3, 2),
)
HEAD = (("fc1", 128, 64 * POOL * POOL), ("fc2", EMBED_DIM, 128))


def param_shapes() -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, cout, cin, k, _ in CONV_STAGES:
        shapes[f"{name}_w"] = (cout, cin, k, k)
        shapes[f"{name}_b"] = (cout,)
    for name, n_out, n_in in HEAD:
        shapes[f"{name}_w"] = (n_out, n_in)
        shapes[f"{name}_b"] = (n_out,)
    return shapes


PARAM_SHAPES = param_shapes()
PARAM_NAMES = tuple(PARAM_SHAPES)


@dataclass
class EncoderParams:
    """Named float64 tensors. ``version`` is bumped by every in-place update."""

    tensors: dict[str, np.ndarray]
    version: int = 0

    def __post_init__(self):
        check_shapes(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[n].ravel() for n in PARAM_NAMES])

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for n in PARAM_NAMES:
            h.update(self.tensors[n].tobytes())
        return h.digest()


def check_shapes(tensors: dict[str, np.ndarray]) -> None:
    if set(tensors) != set(PARAM_NAMES):
        raise ContractViolation(f"parameter names {sorted(tensors)} do not match the architecture")
    for name, shape in PARAM_SHAPES.items():
        if tensors[name].shape != shape:
            raise ContractViolation(f"{name}: shape {tensors[name].shape}, expected {shape}")


def init_params(seed: int) -> EncoderParams:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams(tensors)


# --- layers -----------------------------------------------------------------


def conv_forward(x, w, b, stride):
    """Strided 'same' convolution of x (Cin, H, W); returns output and im2col matrix."""
    cout, cin, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1:3]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, cin * k * k)
    out = cols @ w.reshape(cout, -1).T + b
    return out.T.reshape(cout, ho, wo), cols


def conv_backward(dout, cols, w, x_shape, stride, need_dx=True):
    cout, cin, k, _ = w.shape
    p = k // 2
    _, ho, wo = dout.shape
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cols).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return dw, db, None
    dcols = (d2.T @ w.reshape(cout, -1)).reshape(ho, wo, cin, k, k)
    _, h, wd = x_shape
    dxp = np.zeros((cin, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j].transpose(2, 0, 1)
    return dw, db, dxp[:, p : p + h, p : p + wd]


@dataclass(frozen=True)
class RoiSamples:
    """Bilinear sample geometry of one RoIAlign call (shared by forward and backward)."""

    y0: np.ndarray
    y1: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    ly: np.ndarray
    lx: np.ndarray


def roi_samples(fm_hw: tuple[int, int], roi: BBox, out: int = POOL, stride: int = STRIDE) -> RoiSamples:
    """One sample per bin at the bin center, aligned (-0.5 cell) mapping, border clamped."""
    h, w = fm_hw
    xa = roi.x / stride - 0.5
    xb = roi.x1 / stride - 0.5
    ya = roi.y / stride - 0.5
    yb = roi.y1 / stride - 0.5
    centers = (np.arange(out) + 0.5) / out
    xs = np.clip(xa + centers * (xb - xa), 0.0, w - 1)
    ys = np.clip(ya + centers * (yb - ya), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    return RoiSamples(
        y0=y0,
        y1=np.minimum(y0 + 1, h - 1),
        x0=x0,
        x1=np.minimum(x0 + 1, w - 1),
        ly=ys - y0,
        lx=xs - x0,
    )


def roi_align(fm: np.ndarray, roi: BBox, out: int = POOL, stride: int = STRIDE) -> np.ndarray:
    """Pool a (C, H, W) feature map over an image-pixel box into (C, out, out)."""
    s = roi_samples(fm.shape[1:], roi, out, stride)
    return _roi_gather(fm, s)


def _roi_gather(fm, s: RoiSamples):
    ly, lx = s.ly[:, None], s.lx[None, :]
    return (
        fm[:, s.y0[:, None], s.x0[None, :]] * ((1 - ly) * (1 - lx))
        + fm[:, s.y0[:, None], s.x1[None, :]] * ((1 - ly) * lx)
        + fm[:, s.y1[:, None], s.x0[None, :]] * (ly * (1 - lx))
        + fm[:, s.y1[:, None], s.x1[None, :]] * (ly * lx)
    )


def roi_align_backward(dpooled, s: RoiSamples, fm_shape) -> np.ndarray:
    dfm = np.zeros(fm_shape)
    ly, lx = s.ly[:, None], s.lx[None, :]
    n = len(s.y0)
    corners = (
        (s.y0, s.x0, (1 - ly) * (1 - lx)),
        (s.y0, s.x1, (1 - ly) * lx),
        (s.y1, s.x0, ly * (1 - lx)),
        (s.y1, s.x1, ly * lx),
    )
    for ys, xs, wgt in corners:
        yy = np.broadcast_to(ys[:, None], (n, n))
        xx = np.broadcast_to(xs[None, :], (n, n))
        np.add.at(dfm, (slice(None), yy, xx), dpooled * wgt)
    return dfm


# --- encoder ----------------------------------------------------------------


@dataclass
class ForwardCache:
    params_id: int
    version: int
    image_shape: tuple[int, ...]
    acts: list = field(repr=False)
    cols: list = field(repr=False)
    samples: RoiSamples = field(repr=False)
    feat: np.ndarray = field(repr=False)
    h1: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)


def as_float_image(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 or float in [0, 1] -> (3, H, W) float64."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError(f"expected an (H, W, 3) image, got {img.shape}")
    x = img.astype(np.float64)
    if img.dtype == np.uint8:
        x /= 255.0
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def network_input(img: np.ndarray) -> np.ndarray:
    """Image in [0, 1] mapped to [-1, 1], channels first.

    Without a normalization layer the whitish backgrounds would put a large
    shared offset into every feature; centering the input keeps embeddings
    of different images from starting out nearly parallel.
    """
    return 2.0 * as_float_image(img) - 1.0


def feature_map(params: EncoderParams, x: np.ndarray):
    acts = [x]
    cols = []
    a = x
    for name, _, _, _, stride in CONV_STAGES:
        pre, c = conv_forward(a, params[f"{name}_w"], params[f"{name}_b"], stride)
        a = np.maximum(pre, 0.0)
        acts.append(a)
        cols.append(c)
    return a, acts, cols


def encode(params: EncoderParams, img: np.ndarray, roi: BBox) -> tuple[np.ndarray, ForwardCache]:
    """Unit-norm embedding of ``roi`` in ``img`` plus the cache for ``backprop``."""
    x = network_input(img)
    if not roi.inside(x.shape[2], x.shape[1]):
        raise InvalidArgumentError(f"{roi} lies outside a {x.shape[2]}x{x.shape[1]} image")
    fm, acts, cols = feature_map(params, x)
    samples = roi_samples(fm.shape[1:], roi)
    feat = _roi_gather(fm, samples).ravel()
    h1 = params["fc1_w"] @ feat + params["fc1_b"]
    z = params["fc2_w"] @ np.maximum(h1, 0.0) + params["fc2_b"]
    v = z / np.linalg.norm(z)
    cache = ForwardCache(id(params), params.version, x.shape, acts, cols, samples, feat, h1, z, v)
    return v, cache


def embed(params: EncoderParams, img: np.ndarray, roi: BBox) -> np.ndarray:
    return encode(params, img, roi)[0]


def normalize_backward(z: np.ndarray, grad_v: np.ndarray) -> np.ndarray:
    """Gradient of ``z / ||z||`` wrt z: the tangential part of grad_v, over ||z||."""
    n = np.linalg.norm(z)
    v = z / n
    return (grad_v - v * (v @ grad_v)) / n


def backprop(params: EncoderParams, cache: ForwardCache, grad_v: np.ndarray) -> dict[str, np.ndarray]:
    if cache.params_id != id(params) or cache.version != params.version:
        raise ContractViolation("forward cache is stale: parameters changed since the forward pass")
    grads = {}
    dz = normalize_backward(cache.z, grad_v)
    r1 = np.maximum(cache.h1, 0.0)
    grads["fc2_w"] = np.outer(dz, r1)
    grads["fc2_b"] = dz
    dh1 = (params["fc2_w"].T @ dz) * (cache.h1 > 0)
    grads["fc1_w"] = np.outer(dh1, cache.feat)
    grads["fc1_b"] = dh1
    dfeat = params["fc1_w"].T @ dh1

    fm = cache.acts[-1]
    da = roi_align_backward(dfeat.reshape(fm.shape[0], POOL, POOL), cache.samples, fm.shape)
    for idx in range(len(CONV_STAGES) - 1, -1, -1):
        name, _, _, _, stride = CONV_STAGES[idx]
        dpre = da * (cache.acts[idx + 1] > 0)
        dw, db, da = conv_backward(
            dpre, cache.cols[idx], params[f"{name}_w"], cache.acts[idx].shape, stride, need_dx=idx > 0
        )
        grads[f"{name}_w"] = dw
        grads[f"{name}_b"] = db
    return grads


def momentum_update(key: EncoderParams, query: EncoderParams, m: float) -> EncoderParams:
    """In place: every key tensor becomes ``m * key + (1 - m) * query``."""
    if not 0.0 <= m <= 1.0:
        raise InvalidArgumentError(f"momentum must lie in [0, 1], got {m}")
    for name in PARAM_NAMES:
        kt, qt = key.tensors[name], query.tensors[name]
        if kt.shape != qt.shape:
            raise ContractViolation(f"{name}: shape mismatch {kt.shape} vs {qt.shape}")
        kt *= m
        kt += (1.0 - m) * qt
    key.version += 1
    return key


def freeze_stages(params: EncoderParams, n: int) -> dict[str, bool]:
    """Trainable flags with the first ``n`` conv stages frozen."""
    if not 0 <= n <= len(CONV_STAGES):
        raise InvalidArgumentError(f"frozen stage count must lie in [0, {len(CONV_STAGES)}], got {n}")
    frozen = {stage[0] for stage in CONV_STAGES[:n]}
    return {name: name.rsplit("_", 1)[0] not in frozen for name in params.tensors}


def params_from_tensors(tensors: dict[str, np.ndarray], prefix: str = "") -> EncoderParams:
    picked = {}
    for name, shape in PARAM_SHAPES.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        if tensors[key].shape != shape:
            raise CheckpointError(f"{key}: stored shape {tensors[key].shape}, architecture needs {shape}")
        picked[name] = tensors[key].copy()
    return EncoderParams(picked)
