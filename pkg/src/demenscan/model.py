"""The 4-block CNN: layer kernels with hand-written backward passes, the full
model forward/backward, initialization and the DMSC checkpoint format.

Layers work on batches laid out N x C x H x W and are dtype-generic: training
runs in float32, gradient checks feed float64 through the same code.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ParameterError, SeededRng, ShapeError

Parameters = dict  # name -> ndarray, in declared layer order


@dataclass(frozen=True)
class ModelSpec:
    input_size: tuple = (128, 128, 3)  # H, W, C
    filters: tuple = (32, 64, 128, 64)
    kernel: int = 3
    fc_widths: tuple = (256, 128)
    dropout_rate: float = 0.5
    num_classes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        h, w, c = self.input_size
        if len(self.filters) != 4 or min(self.filters) < 1:
            raise ParameterError(f"need exactly 4 positive filter counts, got {self.filters}")
        if h % 16 or w % 16 or h < 16 or w < 16 or c < 1:
            raise ParameterError(
                f"input {self.input_size} must have H, W divisible by 16 (four 2x2 pools)"
            )
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ParameterError(f"kernel must be odd for same padding, got {self.kernel}")
        if len(self.fc_widths) != 2 or min(self.fc_widths) < 1:
            raise ParameterError(f"need two positive FC widths, got {self.fc_widths}")
        if not 0 <= self.dropout_rate < 1:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")

    @property
    def chw(self) -> tuple:
        h, w, c = self.input_size
        return (c, h, w)

    def activation_size(self, layer: int) -> tuple:
        """(H, W) of conv block ``layer`` (1-based) before its pool."""
        h, w, _ = self.input_size
        return (h >> (layer - 1), w >> (layer - 1))

    @property
    def flatten_dim(self) -> int:
        h, w, _ = self.input_size
        return (h // 16) * (w // 16) * self.filters[-1]

    def param_shapes(self) -> dict:
        shapes = {}
        c_in = self.input_size[2]
        for i, f in enumerate(self.filters, start=1):
            shapes[f"conv{i}.weight"] = (f, c_in, self.kernel, self.kernel)
            shapes[f"conv{i}.bias"] = (f,)
            c_in = f
        width = self.flatten_dim
        for name, out in (("fc1", self.fc_widths[0]), ("fc2", self.fc_widths[1]),
                          ("out", self.num_classes)):
            shapes[f"{name}.weight"] = (out, width)
            shapes[f"{name}.bias"] = (out,)
            width = out
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def init_parameters(spec: ModelSpec, rng: SeededRng) -> Parameters:
    """He-uniform weights, limit sqrt(6 / fan_in); zero biases."""
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(DTYPE)
    return params


# ---------------------------------------------------------------------------
# layer kernels

def _as_batch(x: np.ndarray, ndim: int):
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D input, got shape {x.shape}")
    return x, False


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Unroll same-padded k x k patches of ``x`` (N,C,H,W) into (N*H*W, C*k*k) rows."""
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def col2im(cols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    n, c, h, w = shape
    p = k // 2
    d = cols.reshape(n, h, w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            out[:, :, u:u + h, v:v + w] += d[:, :, u, v]
    return out[:, :, p:p + h, p:p + w]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 same-padded cross-correlation. Returns ``(y, cache)``."""
    xb, squeeze = _as_batch(x, 4)
    f, c, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {kh}x{kw}")
    if xb.shape[1] != c:
        raise ShapeError(f"input has {xb.shape[1]} channels, weights expect {c}")
    if b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} does not match {f} filters")
    n, _, h, wd = xb.shape
    cols = im2col(xb, kh)
    y = cols @ w.reshape(f, -1).T + b
    y = np.ascontiguousarray(y.reshape(n, h, wd, f).transpose(0, 3, 1, 2))
    cache = (xb.shape, cols, w, squeeze)
    return (y[0] if squeeze else y), cache


def conv2d_backward(cache, dy: np.ndarray, weight_grads: bool = True):
    """Returns ``(dx, dw, db)``; ``dw``/``db`` are None when not requested."""
    x_shape, cols, w, squeeze = cache
    dyb = dy[None] if squeeze else dy
    n, _, h, wd = x_shape
    f, _, k, _ = w.shape
    if dyb.shape != (n, f, h, wd):
        raise ShapeError(f"upstream grad {dy.shape} does not match output {(n, f, h, wd)}")
    dy2 = dyb.transpose(0, 2, 3, 1).reshape(-1, f)
    dx = col2im(dy2 @ w.reshape(f, -1), x_shape, k)
    dw = db = None
    if weight_grads:
        dw = (dy2.T @ cols).reshape(w.shape)
        db = dyb.sum(axis=(0, 2, 3))
    return (dx[0] if squeeze else dx), dw, db


def maxpool2x2_forward(x: np.ndarray):
    """2x2/stride-2 max pool. Ties go to the first element in row-major window order."""
    xb, squeeze = _as_batch(x, 4)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max pool needs even spatial extents, got {h}x{w}")
    win = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if squeeze:
        return y[0], idx[0]
    return y, idx


def maxpool2x2_backward(argmax: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if argmax.shape != dy.shape:
        raise ShapeError(f"upstream grad {dy.shape} does not match pool output {argmax.shape}")
    squeeze = argmax.ndim == 3
    idx = argmax[None] if squeeze else argmax
    dyb = dy[None] if squeeze else dy
    n, c, hh, wh = idx.shape
    win = np.zeros((n, c, hh, wh, 4), dtype=dy.dtype)
    np.put_along_axis(win, idx[..., None], dyb[..., None], axis=-1)
    dx = win.reshape(n, c, hh, wh, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * wh)
    return dx[0] if squeeze else dx


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``y = W x + b`` for a vector or each row of a batch."""
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b


def dense_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, weight_grads: bool = True):
    if dy.shape[-1] != w.shape[0] or dy.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"dense backward: upstream {dy.shape} vs input {x.shape}, weight {w.shape}")
    dx = dy @ w
    if not weight_grads:
        return dx, None, None
    xb = x.reshape(-1, w.shape[1])
    dyb = dy.reshape(-1, w.shape[0])
    return dx, dyb.T @ xb, dyb.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(out: np.ndarray, dy: np.ndarray, guided: bool = False) -> np.ndarray:
    """Gradient through ReLU given its forward output.

    The guided rule additionally drops negative incoming gradient.
    """
    keep = out > 0
    if guided:
        keep &= dy > 0
    return np.where(keep, dy, dy.dtype.type(0))


def dropout(x: np.ndarray, rate: float, mode: str, rng: Optional[SeededRng] = None):
    """Inverted dropout. Returns ``(y, mask)`` where ``mask`` holds the scale per unit."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        mask = np.ones_like(x)
        return x.copy(), mask
    if mode != "train":
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels, num_classes: Optional[int] = None):
    """Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits.

    ``logits`` is (K,) with an int label, or (N, K) with N labels.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    lb = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(labels))
    k = lb.shape[1]
    if y.shape != (lb.shape[0],):
        raise ShapeError(f"{lb.shape[0]} logit rows but labels of shape {y.shape}")
    if y.dtype.kind not in "iu" or (y < 0).any() or (y >= k).any():
        raise ParameterError(f"labels must be integers in [0, {k}), got {y.tolist()}")
    z = lb - lb.max(axis=1, keepdims=True)
    log_sum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(lb.shape[0])
    losses = log_sum - z[rows, y]
    probs = np.exp(z - log_sum[:, None])
    grad = probs
    grad[rows, y] -= 1
    grad /= lb.shape[0]
    loss = float(losses.mean())
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# full model

@dataclass
class ForwardTrace:
    """Everything the backward pass and the explainers read back."""
    batched: bool
    conv_caches: list = field(default_factory=list)
    conv_acts: list = field(default_factory=list)  # post-ReLU, pre-pool, N x F x H x W
    pool_argmax: list = field(default_factory=list)
    pooled_shape: tuple = ()
    flat: np.ndarray = None
    fc1_act: np.ndarray = None
    fc2_act: np.ndarray = None
    dropout_mask: np.ndarray = None
    logits: np.ndarray = None  # (K,) or (N, K)


def model_forward(spec: ModelSpec, params: Parameters, x: np.ndarray, mode: str = "eval",
                  rng: Optional[SeededRng] = None) -> ForwardTrace:
    xb, squeeze = _as_batch(x, 4)
    if xb.shape[1:] != spec.chw:
        raise ShapeError(f"input {tuple(xb.shape[1:])} does not match spec C x H x W {spec.chw}")
    trace = ForwardTrace(batched=not squeeze)
    h = xb
    for i in range(1, 5):
        z, cache = conv2d_forward(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        a = relu(z)
        h, idx = maxpool2x2_forward(a)
        trace.conv_caches.append(cache)
        trace.conv_acts.append(a)
        trace.pool_argmax.append(idx)
    trace.pooled_shape = h.shape
    trace.flat = h.reshape(h.shape[0], -1)
    trace.fc1_act = relu(dense_forward(trace.flat, params["fc1.weight"], params["fc1.bias"]))
    trace.fc2_act = relu(dense_forward(trace.fc1_act, params["fc2.weight"], params["fc2.bias"]))
    d, trace.dropout_mask = dropout(trace.fc2_act, spec.dropout_rate, mode, rng)
    logits = dense_forward(d, params["out.weight"], params["out.bias"])
    trace.logits = logits[0] if squeeze else logits
    return trace


ReluHook = Callable[[str, np.ndarray, np.ndarray, np.ndarray], None]


def model_backward(spec: ModelSpec, params: Parameters, trace: ForwardTrace,
                   dlogits: np.ndarray, guided: bool = False, weight_grads: bool = True,
                   relu_hook: Optional[ReluHook] = None):
    """Backpropagate ``dlogits`` through a traced forward pass.

    Returns ``(grads, dx)``.  ``guided`` switches every ReLU to the guided rule.
    ``relu_hook(site, forward_out, incoming, outgoing)`` sees each ReLU site.
    """
    grads = {}
    d = dlogits[None] if not trace.batched else dlogits
    if d.shape != (trace.flat.shape[0], spec.num_classes):
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match the trace")

    def through_relu(site, out, g):
        res = relu_backward(out, g, guided)
        if relu_hook is not None:
            relu_hook(site, out, g, res)
        return res

    drop_in = trace.fc2_act * trace.dropout_mask
    d, grads["out.weight"], grads["out.bias"] = dense_backward(
        drop_in, params["out.weight"], d, weight_grads)
    d = d * trace.dropout_mask
    d = through_relu("fc2", trace.fc2_act, d)
    d, grads["fc2.weight"], grads["fc2.bias"] = dense_backward(
        trace.fc1_act, params["fc2.weight"], d, weight_grads)
    d = through_relu("fc1", trace.fc1_act, d)
    d, grads["fc1.weight"], grads["fc1.bias"] = dense_backward(
        trace.flat, params["fc1.weight"], d, weight_grads)
    d = d.reshape(trace.pooled_shape)
    for i in range(4, 0, -1):
        d = maxpool2x2_backward(trace.pool_argmax[i - 1], d)
        d = through_relu(f"conv{i}", trace.conv_acts[i - 1], d)
        d, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv2d_backward(
            trace.conv_caches[i - 1], d, weight_grads)
    if not weight_grads:
        grads = {}
    else:
        grads = {name: grads[name] for name in spec.param_shapes()}
    return grads, (d if trace.batched else d[0])


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DMSC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")  # magic, version, header byte length
_CRC = struct.Struct("<I")


class CorruptCheckpointError(ValueError):
    def __init__(self, field_name: str, detail: str):
        super().__init__(f"corrupt checkpoint ({field_name}): {detail}")
        self.field = field_name


def checkpoint_bytes(spec: ModelSpec, params: Parameters) -> bytes:
    shapes = spec.param_shapes()
    if list(params) != list(shapes):
        raise ShapeError("parameter names/order do not match the spec")
    entries = []
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: shape {params[name].shape}, spec says {shape}")
        entries.append({"name": name, "shape": list(shape)})
    header = json.dumps({"spec": spec.to_dict(), "params": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
    body += header
    for name in shapes:
        body += np.ascontiguousarray(params[name], dtype="<f4").tobytes()
    body += _CRC.pack(zlib.crc32(body))
    return bytes(body)


def checkpoint_save(spec: ModelSpec, params: Parameters, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(spec, params))


def checkpoint_from_bytes(blob: bytes):
    if len(blob) < _PREFIX.size + _CRC.size:
        raise CorruptCheckpointError("length", f"file is only {len(blob)} bytes")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError("version", f"unsupported format version {version}")
    (stored_crc,) = _CRC.unpack_from(blob, len(blob) - _CRC.size)
    if zlib.crc32(blob[:-_CRC.size]) != stored_crc:
        raise CorruptCheckpointError("crc", "CRC-32 mismatch")
    start = _PREFIX.size
    if start + header_len > len(blob) - _CRC.size:
        raise CorruptCheckpointError("header", "header length runs past end of file")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        entries = [(e["name"], tuple(e["shape"])) for e in header["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError("header", str(exc)) from None
    if entries != list(spec.param_shapes().items()):
        raise CorruptCheckpointError("header", "parameter table disagrees with architecture")
    offset = start + header_len
    params = {}
    for name, shape in entries:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob) - _CRC.size:
            raise CorruptCheckpointError("payload", f"truncated while reading {name}")
        params[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4,
                                     offset=offset).reshape(shape).astype(DTYPE)
        offset += nbytes
    if offset != len(blob) - _CRC.size:
        raise CorruptCheckpointError("payload", f"{len(blob) - _CRC.size - offset} trailing bytes")
    return spec, params


def checkpoint_load(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptCheckpointError("file", str(exc)) from None
    return checkpoint_from_bytes(blob)
