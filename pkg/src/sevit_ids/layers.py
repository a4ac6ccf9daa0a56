"""Building blocks of the hybrid classifier, each with a hand-derived backward pass.

Conventions
-----------
* Token tensors are ``(batch, steps, channels)``.
* Dense weights are stored ``(in, out)`` so a forward pass is ``x @ W + b``.
* LSTM gate blocks are laid out ``[input, forget, cell, output]`` along the
  ``4H`` axis of ``input_weights``, ``recurrent_weights`` and ``bias``.

Backward functions return gradients packed in the same dataclass as the
parameters, so ``grads.weight`` is ``dLoss/dweight`` and so on.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .errors import ShapeError
from .numkernel import (
    activation,
    activation_grad,
    as_matrix2,
    as_matrix3,
    global_avg_pool_tokens,
    sigmoid,
)

GATE_ORDER = ("input", "forget", "cell", "output")


class _Params:
    """Mixin giving parameter dataclasses a stable, named flattening."""

    def named_arrays(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for f in fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, _Params):
                yield from value.named_arrays(name + ".")
            elif isinstance(value, np.ndarray):
                yield name, value

    def zeros_like(self):
        kwargs = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, _Params):
                kwargs[f.name] = value.zeros_like()
            elif isinstance(value, np.ndarray):
                kwargs[f.name] = np.zeros_like(value)
            else:
                kwargs[f.name] = value
        return type(self)(**kwargs)

    @property
    def size(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


@dataclass(eq=False)
class DenseParams(_Params):
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"dense weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass(eq=False)
class SEParams(_Params):
    reduce: DenseParams  # C -> C/r
    expand: DenseParams  # C/r -> C
    ratio: int = 4

    def __post_init__(self):
        if self.reduce.n_out != self.expand.n_in or self.reduce.n_in != self.expand.n_out:
            raise ShapeError("SE reduce/expand layers do not chain back to the channel count")


@dataclass(eq=False)
class LayerNormParams(_Params):
    gain: np.ndarray
    bias: np.ndarray
    eps: float = 1e-5


@dataclass(eq=False)
class LstmParams(_Params):
    input_weights: np.ndarray  # (in, 4H)
    recurrent_weights: np.ndarray  # (H, 4H)
    bias: np.ndarray  # (4H,)

    def __post_init__(self):
        h = self.recurrent_weights.shape[0]
        if (
            self.recurrent_weights.shape != (h, 4 * h)
            or self.input_weights.shape[1] != 4 * h
            or self.bias.shape != (4 * h,)
        ):
            raise ShapeError(
                "LSTM parameter shapes inconsistent: "
                f"input {self.input_weights.shape}, recurrent {self.recurrent_weights.shape}, "
                f"bias {self.bias.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.recurrent_weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.input_weights.shape[0]


@dataclass(eq=False)
class BiLstmParams(_Params):
    forward_dir: LstmParams
    backward_dir: LstmParams

    def __post_init__(self):
        if (
            self.forward_dir.hidden != self.backward_dir.hidden
            or self.forward_dir.n_in != self.backward_dir.n_in
        ):
            raise ShapeError("BiLSTM directions must share hidden size and input size")

    @property
    def hidden(self) -> int:
        return self.forward_dir.hidden


# ---------------------------------------------------------------------------
# initialisation


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_dense(rng: np.random.Generator, n_in: int, n_out: int) -> DenseParams:
    return DenseParams(glorot_uniform(rng, n_in, n_out), np.zeros(n_out))


def se_width(channels: int, ratio: int) -> int:
    return max(1, channels // ratio)


def init_se(rng: np.random.Generator, channels: int, ratio: int = 4) -> SEParams:
    mid = se_width(channels, ratio)
    return SEParams(init_dense(rng, channels, mid), init_dense(rng, mid, channels), ratio)


def init_layer_norm(channels: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(np.ones(channels), np.zeros(channels), eps)


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int, forget_bias: float = 1.0) -> LstmParams:
    wx = glorot_uniform(rng, n_in, 4 * hidden)
    wh = glorot_uniform(rng, hidden, 4 * hidden)
    b = np.zeros(4 * hidden)
    b[hidden : 2 * hidden] = forget_bias
    return LstmParams(wx, wh, b)


def init_bilstm(rng: np.random.Generator, n_in: int, hidden: int) -> BiLstmParams:
    return BiLstmParams(init_lstm(rng, n_in, hidden), init_lstm(rng, n_in, hidden))


# ---------------------------------------------------------------------------
# dense


def dense_forward(p: DenseParams, x, act: str = "none") -> np.ndarray:
    x = as_matrix2(x)
    if x.shape[1] != p.n_in:
        raise ShapeError(f"dense input has {x.shape[1]} columns, layer expects {p.n_in}")
    return activation(x @ p.weight + p.bias, act)


def dense_backward(p: DenseParams, x, act: str, upstream) -> tuple[DenseParams, np.ndarray]:
    x = as_matrix2(x)
    upstream = as_matrix2(upstream, "upstream")
    if x.shape[1] != p.n_in:
        raise ShapeError(f"dense input has {x.shape[1]} columns, layer expects {p.n_in}")
    if upstream.shape != (x.shape[0], p.n_out):
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {(x.shape[0], p.n_out)}")
    pre = x @ p.weight + p.bias
    out = activation(pre, act)
    dpre = upstream * activation_grad(pre, out, act)
    grads = DenseParams(x.T @ dpre, dpre.sum(axis=0))
    return grads, dpre @ p.weight.T


def _dense_tokens(p: DenseParams, x: np.ndarray, act: str) -> np.ndarray:
    b, t, c = x.shape
    return dense_forward(p, x.reshape(b * t, c), act).reshape(b, t, p.n_out)


# ---------------------------------------------------------------------------
# squeeze-and-excitation


def _se_parts(p: SEParams, x: np.ndarray):
    if x.shape[2] != p.reduce.n_in:
        raise ShapeError(f"SE input has {x.shape[2]} channels, layer expects {p.reduce.n_in}")
    pooled = global_avg_pool_tokens(x)
    hidden_pre = pooled @ p.reduce.weight + p.reduce.bias
    hidden = np.maximum(hidden_pre, 0.0)
    gates = sigmoid(hidden @ p.expand.weight + p.expand.bias)
    return pooled, hidden_pre, hidden, gates


def se_forward(p: SEParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Rescale each channel by a gate computed from the token-averaged input.

    Returns ``(y, gates)`` with ``y[b, t, c] = x[b, t, c] * gates[b, c]``.
    """
    x = as_matrix3(x)
    _, _, _, gates = _se_parts(p, x)
    return x * gates[:, None, :], gates


def se_backward(p: SEParams, x, upstream) -> tuple[SEParams, np.ndarray]:
    x = as_matrix3(x)
    upstream = as_matrix3(upstream, "upstream")
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream shape {upstream.shape} != input shape {x.shape}")
    pooled, hidden_pre, hidden, gates = _se_parts(p, x)
    dx = upstream * gates[:, None, :]
    dgates = (upstream * x).sum(axis=1)
    dexp = dgates * gates * (1.0 - gates)
    d_expand = DenseParams(hidden.T @ dexp, dexp.sum(axis=0))
    dhidden = (dexp @ p.expand.weight.T) * (hidden_pre > 0)
    d_reduce = DenseParams(pooled.T @ dhidden, dhidden.sum(axis=0))
    dpooled = dhidden @ p.reduce.weight.T
    dx = dx + dpooled[:, None, :] / x.shape[1]
    return SEParams(d_reduce, d_expand, p.ratio), dx


# ---------------------------------------------------------------------------
# layer norm over the channel axis of token tensors


def _layer_norm_parts(p: LayerNormParams, x: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    var = (centred**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = centred * inv_std
    return xhat, inv_std


def layer_norm_forward(p: LayerNormParams, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != p.gain.shape[0]:
        raise ShapeError(f"layer norm input has {x.shape[-1]} channels, expects {p.gain.shape[0]}")
    xhat, _ = _layer_norm_parts(p, x)
    return xhat * p.gain + p.bias


def layer_norm_backward(p: LayerNormParams, x: np.ndarray, upstream: np.ndarray):
    xhat, inv_std = _layer_norm_parts(p, x)
    reduce_axes = tuple(range(x.ndim - 1))
    grads = LayerNormParams((upstream * xhat).sum(axis=reduce_axes), upstream.sum(axis=reduce_axes), p.eps)
    dxhat = upstream * p.gain
    n = x.shape[-1]
    dx = inv_std / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return grads, dx


# ---------------------------------------------------------------------------
# SE-ViT block: embed -> SE -> residual -> layer norm -> flatten


@dataclass(eq=False)
class VitCache:
    x: np.ndarray
    embedded: np.ndarray
    residual: np.ndarray


def vit_se_block_forward(
    embed: DenseParams, se: SEParams, ln: LayerNormParams, x
) -> tuple[np.ndarray, VitCache]:
    """Token-wise ReLU embedding, SE recalibration with a skip around it, layer norm, flatten.

    Output shape is ``(batch, steps * E)``.
    """
    x = as_matrix3(x)
    if x.shape[2] != embed.n_in:
        raise ShapeError(f"ViT block input has {x.shape[2]} channels, embedding expects {embed.n_in}")
    e = _dense_tokens(embed, x, "relu")
    a, _ = se_forward(se, e)
    r = e + a
    out = layer_norm_forward(ln, r)
    return out.reshape(x.shape[0], -1), VitCache(x, e, r)


def vit_se_block_backward(
    embed: DenseParams, se: SEParams, ln: LayerNormParams, cache: VitCache, upstream
) -> tuple[tuple[DenseParams, SEParams, LayerNormParams], np.ndarray]:
    upstream = as_matrix2(upstream, "upstream")
    b, t, e_width = cache.embedded.shape
    if upstream.shape != (b, t * e_width):
        raise ShapeError(f"upstream shape {upstream.shape} != block output {(b, t * e_width)}")
    dr = upstream.reshape(b, t, e_width)
    ln_grads, dres = layer_norm_backward(ln, cache.residual, dr)
    se_grads, de_se = se_backward(se, cache.embedded, dres)
    de = dres + de_se
    c = cache.x.shape[2]
    embed_grads, dx = dense_backward(embed, cache.x.reshape(b * t, c), "relu", de.reshape(b * t, e_width))
    return (embed_grads, se_grads, ln_grads), dx.reshape(b, t, c)


# ---------------------------------------------------------------------------
# LSTM


def _lstm_gates(p: LstmParams, x_t, h, c):
    hsz = p.hidden
    pre = x_t @ p.input_weights + h @ p.recurrent_weights + p.bias
    i = sigmoid(pre[:, :hsz])
    f = sigmoid(pre[:, hsz : 2 * hsz])
    g = np.tanh(pre[:, 2 * hsz : 3 * hsz])
    o = sigmoid(pre[:, 3 * hsz :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return i, f, g, o, c_new, tc


def lstm_cell_step(p: LstmParams, x_t, h, c) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step; returns ``(h', c')``."""
    x_t = as_matrix2(x_t, "x_t")
    h = as_matrix2(h, "h")
    c = as_matrix2(c, "c")
    if x_t.shape[1] != p.n_in or h.shape[1] != p.hidden or c.shape != h.shape or h.shape[0] != x_t.shape[0]:
        raise ShapeError(
            f"LSTM step shapes x_t {x_t.shape}, h {h.shape}, c {c.shape} do not fit "
            f"input size {p.n_in} and hidden size {p.hidden}"
        )
    i, f, g, o, c_new, tc = _lstm_gates(p, x_t, h, c)
    return o * tc, c_new


@dataclass(eq=False)
class LstmCache:
    x: np.ndarray  # (B, T, in)
    hs: np.ndarray  # (B, T+1, H), hs[:, 0] is the initial state
    cs: np.ndarray  # (B, T+1, H)
    gates: np.ndarray  # (B, T, 4H) post-activation i, f, g, o
    tanh_c: np.ndarray  # (B, T, H)


def lstm_forward_seq(p: LstmParams, x) -> tuple[np.ndarray, LstmCache]:
    """Scan an LSTM over the steps axis from zero state; returns all hidden states."""
    x = as_matrix3(x)
    if x.shape[2] != p.n_in:
        raise ShapeError(f"LSTM input has {x.shape[2]} channels, layer expects {p.n_in}")
    b, t, _ = x.shape
    hsz = p.hidden
    hs = np.zeros((b, t + 1, hsz))
    cs = np.zeros((b, t + 1, hsz))
    gates = np.empty((b, t, 4 * hsz))
    tanh_c = np.empty((b, t, hsz))
    for step in range(t):
        i, f, g, o, c_new, tc = _lstm_gates(p, x[:, step], hs[:, step], cs[:, step])
        gates[:, step] = np.concatenate([i, f, g, o], axis=1)
        cs[:, step + 1] = c_new
        tanh_c[:, step] = tc
        hs[:, step + 1] = o * tc
    return hs[:, 1:].copy(), LstmCache(x, hs, cs, gates, tanh_c)


def lstm_backward_seq(p: LstmParams, cache: LstmCache, upstream) -> tuple[LstmParams, np.ndarray]:
    """Backpropagation through time for ``lstm_forward_seq``."""
    upstream = as_matrix3(upstream, "upstream")
    b, t, _ = cache.x.shape
    hsz = p.hidden
    if upstream.shape != (b, t, hsz):
        raise ShapeError(f"upstream shape {upstream.shape} != LSTM output {(b, t, hsz)}")
    d_wx = np.zeros_like(p.input_weights)
    d_wh = np.zeros_like(p.recurrent_weights)
    d_b = np.zeros_like(p.bias)
    dx = np.zeros_like(cache.x)
    dh_next = np.zeros((b, hsz))
    dc_next = np.zeros((b, hsz))
    for step in range(t - 1, -1, -1):
        gate = cache.gates[:, step]
        i = gate[:, :hsz]
        f = gate[:, hsz : 2 * hsz]
        g = gate[:, 2 * hsz : 3 * hsz]
        o = gate[:, 3 * hsz :]
        tc = cache.tanh_c[:, step]
        dh = upstream[:, step] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dpre = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * cache.cs[:, step] * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        d_wx += cache.x[:, step].T @ dpre
        d_wh += cache.hs[:, step].T @ dpre
        d_b += dpre.sum(axis=0)
        dx[:, step] = dpre @ p.input_weights.T
        dh_next = dpre @ p.recurrent_weights.T
        dc_next = dc * f
    return LstmParams(d_wx, d_wh, d_b), dx


@dataclass(eq=False)
class BiLstmCache:
    forward_dir: LstmCache
    backward_dir: LstmCache


def bilstm_forward(p: BiLstmParams, x) -> tuple[np.ndarray, BiLstmCache]:
    """Run both directions and concatenate per step: output ``(batch, steps, 2H)``.

    The backward half at step ``t`` is the reverse-direction state produced
    when the reverse scan visits ``t``.
    """
    x = as_matrix3(x)
    h_fwd, c_fwd = lstm_forward_seq(p.forward_dir, x)
    h_rev, c_rev = lstm_forward_seq(p.backward_dir, x[:, ::-1])
    seq = np.concatenate([h_fwd, h_rev[:, ::-1]], axis=2)
    return seq, BiLstmCache(c_fwd, c_rev)


def bilstm_backward(p: BiLstmParams, cache: BiLstmCache, upstream) -> tuple[BiLstmParams, np.ndarray]:
    upstream = as_matrix3(upstream, "upstream")
    hsz = p.hidden
    b, t, _ = cache.forward_dir.x.shape
    if upstream.shape != (b, t, 2 * hsz):
        raise ShapeError(f"upstream shape {upstream.shape} != BiLSTM output {(b, t, 2 * hsz)}")
    g_fwd, dx_fwd = lstm_backward_seq(p.forward_dir, cache.forward_dir, upstream[:, :, :hsz])
    g_rev, dx_rev = lstm_backward_seq(p.backward_dir, cache.backward_dir, upstream[:, ::-1, hsz:])
    return BiLstmParams(g_fwd, g_rev), dx_fwd + dx_rev[:, ::-1]


# ---------------------------------------------------------------------------
# fusion


def concat_features(a, b) -> np.ndarray:
    a = as_matrix2(a, "a")
    b = as_matrix2(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: row counts differ")
    return np.concatenate([a, b], axis=1)
