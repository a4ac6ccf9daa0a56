"""Dense float64 numerical kernel.

Values are plain numpy arrays:

* ``Matrix2`` is a 2-D float64 array ``(rows, cols)``.
* ``Matrix3`` is a 3-D float64 array ``(batch, steps, channels)``.

Randomness comes from ``make_rng``, which always uses numpy's PCG64 bit
generator (PCG-XSL-RR 128/64).  PCG64 produces the same stream on every
platform for a given seed, so every seeded operation in the package is
reproducible.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

Matrix2 = np.ndarray
Matrix3 = np.ndarray

RNG_ALGORITHM = "PCG64"
ACTIVATIONS = ("relu", "sigmoid", "tanh", "none")


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator seeded with an unsigned 64-bit integer."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix2(x, name: str = "x") -> Matrix2:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_matrix3(x, name: str = "x") -> Matrix3:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be 3-D (batch, steps, channels), got shape {arr.shape}")
    return arr


def matmul(a: Matrix2, b: Matrix2) -> Matrix2:
    a = as_matrix2(a, "a")
    b = as_matrix2(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise activation; ``kind`` is one of relu, sigmoid, tanh, none."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "none":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(pre: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of the activation, given its input ``pre`` and output ``out``."""
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    if kind == "sigmoid":
        return out * (1.0 - out)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "none":
        return np.ones_like(pre)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def softmax_rows(x: Matrix2) -> Matrix2:
    x = as_matrix2(x)
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layer_norm(x: Matrix2, gain, bias, eps: float = 1e-5) -> Matrix2:
    """Normalise each row to zero mean and unit population variance, then apply gain and bias."""
    x = as_matrix2(x)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm gain/bias must have length {x.shape[1]}, got {gain.shape} and {bias.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def global_avg_pool_tokens(x: Matrix3) -> Matrix2:
    """Average over the steps axis: (batch, steps, channels) -> (batch, channels)."""
    x = as_matrix3(x)
    if x.shape[1] < 1:
        raise ShapeError("global_avg_pool_tokens needs at least one step")
    return x.mean(axis=1)


def grad_check(
    f: Callable[[np.ndarray], float],
    x0,
    analytic_grad,
    step: float = 1e-5,
) -> float:
    """Compare an analytic gradient with central finite differences.

    Returns ``max_i |num_i - ana_i| / max(1e-8, |num_i| + |ana_i|)``.
    ``f`` receives a fresh copy of the perturbed vector on every call.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    ana = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if ana.shape != x0.shape:
        raise ShapeError(f"analytic gradient shape {ana.shape} != parameter shape {x0.shape}")
    num = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while perturbing coordinate {i}")
        num[i] = (fp - fm) / (2.0 * step)
    if x0.size == 0:
        return 0.0
    rel = np.abs(num - ana) / np.maximum(1e-8, np.abs(num) + np.abs(ana))
    return float(rel.max())
