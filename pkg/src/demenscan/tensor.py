"""Dense float32 arrays and the seeded random primitives the rest of the package uses.

A "tensor" here is simply a C-contiguous ``numpy.ndarray`` of float32.  The
helpers below add the shape checking and error types that the layers rely on;
everything else is plain numpy.
"""
from __future__ import annotations

import os

import numpy as np

DTYPE = np.float32

# Stream tags for derive_rng; keep them distinct so that e.g. the split and the
# batch order never share a generator.
STREAM_SPLIT = 1
STREAM_FOLD = 2
STREAM_BATCH = 3
STREAM_INIT = 4
STREAM_DROPOUT = 5


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


SeededRng = np.random.Generator


def make_rng(seed: int) -> SeededRng:
    """PCG64 generator; the stream is fixed by numpy across platforms."""
    return np.random.default_rng(seed)


def derive_rng(seed: int, *keys: int) -> SeededRng:
    """Independent child generator for ``(seed, *keys)``."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def as_tensor(x, dtype=DTYPE) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a: np.ndarray, b=None) -> np.ndarray:
    """Pointwise ``add``/``sub``/``mul``, ``scalar-mul`` or ``max-with-0``.

    Only scalar broadcasting is allowed; array operands must match exactly.
    """
    a = np.asarray(a)
    if op == "max-with-0":
        return np.maximum(a, a.dtype.type(0))
    if op == "scalar-mul":
        if not np.isscalar(b):
            raise ShapeError("scalar-mul expects a scalar right operand")
        return a * a.dtype.type(b)
    if op not in _BINARY:
        raise ParameterError(f"unknown elementwise op {op!r}")
    if np.isscalar(b):
        return _BINARY[op](a, a.dtype.type(b))
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return _BINARY[op](a, b)


def rng_fill(rng: SeededRng, dist: str, shape, *params: float) -> np.ndarray:
    """Fill a new float32 tensor from ``uniform(lo, hi)`` or ``normal(mu, sigma)``."""
    shape = tuple(int(s) for s in shape)
    if dist == "uniform":
        lo, hi = params
        if not lo <= hi:
            raise ParameterError(f"uniform requires lo <= hi, got ({lo}, {hi})")
        return rng.uniform(lo, hi, size=shape).astype(DTYPE)
    if dist == "normal":
        mu, sigma = params
        if sigma < 0:
            raise ParameterError(f"normal requires sigma >= 0, got {sigma}")
        return rng.normal(mu, sigma, size=shape).astype(DTYPE)
    raise ParameterError(f"unknown distribution {dist!r}")


def worker_count() -> int:
    """Thread cap from ``DEMENSCAN_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("DEMENSCAN_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"DEMENSCAN_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise ParameterError("DEMENSCAN_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)
