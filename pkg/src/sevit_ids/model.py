"""The four architecture variants, their forward/backward passes and weight files.

Variants (numbered as in the ablation table):

1. ``Seq_ViT_then_BiLSTM``  SE-ViT tokens ``(T, E)`` feed a BiLSTM; the BiLSTM
   sequence is flattened into the head.
2. ``Seq_BiLSTM_then_ViT``  the BiLSTM sequence ``(T, 2H)`` is embedded by the
   SE-ViT block (``Dense(2H -> E)``); the block output feeds the head.
3. ``Parallel_H32``  both branches read the raw input; flattened outputs are
   concatenated (ViT first) into the head.  This is the proposed model.
4. ``Parallel_H64``  as 3 with a 64-unit BiLSTM.

Weights file format (``.npz``, version 1): one ``<name>.npy`` member per
parameter, named as in ``Model.named_parameters()``, plus ``__spec__``, a
0-d unicode array holding the JSON-encoded ``ModelSpec`` and
``format_version``.  Arrays are float64 and stored losslessly.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import layers as L
from ._npz import read_npz, write_npz
from .errors import ConfigError, ShapeError
from .numkernel import as_matrix3, make_rng, softmax_rows

WEIGHTS_FORMAT_VERSION = 1

VARIANTS = {
    1: "Seq_ViT_then_BiLSTM",
    2: "Seq_BiLSTM_then_ViT",
    3: "Parallel_H32",
    4: "Parallel_H64",
}
VARIANT_NUMBERS = {name: num for num, name in VARIANTS.items()}
DEFAULT_HIDDEN = {
    "Seq_ViT_then_BiLSTM": 32,
    "Seq_BiLSTM_then_ViT": 32,
    "Parallel_H32": 32,
    "Parallel_H64": 64,
}


def resolve_variant(variant) -> str:
    """Accept a variant name or its ablation number (1-4)."""
    if isinstance(variant, str) and variant in VARIANT_NUMBERS:
        return variant
    try:
        return VARIANTS[int(variant)]
    except (KeyError, ValueError, TypeError):
        raise ConfigError(
            f"variant: unknown value {variant!r}; expected 1-4 or one of {list(VARIANT_NUMBERS)}"
        ) from None


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "Parallel_H32"
    steps: int = 60
    input_channels: int = 1
    embed: int = 32
    se_ratio: int = 4
    hidden: Optional[int] = None
    n_classes: int = 6

    def __post_init__(self):
        object.__setattr__(self, "variant", resolve_variant(self.variant))
        if self.hidden is None:
            object.__setattr__(self, "hidden", DEFAULT_HIDDEN[self.variant])
        for name in ("steps", "input_channels", "embed", "se_ratio", "hidden"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
        if not isinstance(self.n_classes, (int, np.integer)) or self.n_classes < 2:
            raise ConfigError(f"n_classes: must be an integer >= 2, got {self.n_classes!r}")

    @property
    def variant_number(self) -> int:
        return VARIANT_NUMBERS[self.variant]

    @property
    def parallel(self) -> bool:
        return self.variant.startswith("Parallel")

    @property
    def head_inputs(self) -> int:
        t, e, h = self.steps, self.embed, self.hidden
        if self.parallel:
            return t * e + t * 2 * h
        if self.variant == "Seq_ViT_then_BiLSTM":
            return t * 2 * h
        return t * e

    def to_dict(self) -> dict:
        return {k: int(v) if isinstance(v, (int, np.integer)) else v for k, v in asdict(self).items()}


@dataclass
class ForwardCache:
    x: np.ndarray
    vit: Optional[L.VitCache] = None
    bilstm: Optional[L.BiLstmCache] = None
    vit_flat: Optional[np.ndarray] = None
    bilstm_seq: Optional[np.ndarray] = None
    head_in: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    embed: L.DenseParams
    se: L.SEParams
    ln: L.LayerNormParams
    bilstm: L.BiLstmParams
    head: L.DenseParams

    def named_parameters(self) -> "OrderedDict[str, np.ndarray]":
        """Parameter arrays by stable name.  The arrays are live: updating them updates the model."""
        reg = OrderedDict()
        reg.update(self.embed.named_arrays("vit.embed."))
        reg.update(self.se.named_arrays("vit.se."))
        reg.update(self.ln.named_arrays("vit.ln."))
        reg.update(self.bilstm.named_arrays("bilstm."))
        reg.update(self.head.named_arrays("head."))
        return reg

    def count_params(self) -> int:
        return count_params(self)

    def copy(self) -> "Model":
        clone = build_model(self.spec, make_rng(0))
        for name, arr in clone.named_parameters().items():
            arr[...] = self.named_parameters()[name]
        return clone

    # -- inference -------------------------------------------------------

    def logits(self, x) -> tuple[np.ndarray, ForwardCache]:
        x = as_matrix3(x)
        spec = self.spec
        if x.shape[1:] != (spec.steps, spec.input_channels):
            raise ShapeError(
                f"model expects input (batch, {spec.steps}, {spec.input_channels}), got {x.shape}"
            )
        cache = ForwardCache(x=x)
        batch = x.shape[0]
        if spec.parallel:
            cache.vit_flat, cache.vit = L.vit_se_block_forward(self.embed, self.se, self.ln, x)
            cache.bilstm_seq, cache.bilstm = L.bilstm_forward(self.bilstm, x)
            head_in = L.concat_features(cache.vit_flat, cache.bilstm_seq.reshape(batch, -1))
        elif spec.variant == "Seq_ViT_then_BiLSTM":
            cache.vit_flat, cache.vit = L.vit_se_block_forward(self.embed, self.se, self.ln, x)
            tokens = cache.vit_flat.reshape(batch, spec.steps, spec.embed)
            cache.bilstm_seq, cache.bilstm = L.bilstm_forward(self.bilstm, tokens)
            head_in = cache.bilstm_seq.reshape(batch, -1)
        else:
            cache.bilstm_seq, cache.bilstm = L.bilstm_forward(self.bilstm, x)
            cache.vit_flat, cache.vit = L.vit_se_block_forward(self.embed, self.se, self.ln, cache.bilstm_seq)
            head_in = cache.vit_flat
        cache.head_in = head_in
        cache.logits = L.dense_forward(self.head, head_in, "none")
        return cache.logits, cache

    def forward(self, x) -> tuple[np.ndarray, ForwardCache]:
        """Class probabilities ``(batch, n_classes)`` and the cache for ``backward``."""
        logits, cache = self.logits(x)
        return softmax_rows(logits), cache

    def predict(self, x, batch_size: int = 512) -> np.ndarray:
        x = as_matrix3(x)
        out = []
        for start in range(0, x.shape[0], batch_size):
            probs, _ = self.forward(x[start : start + batch_size])
            out.append(predict_from_scores(probs))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def predict_proba(self, x, batch_size: int = 512) -> np.ndarray:
        x = as_matrix3(x)
        chunks = [self.forward(x[s : s + batch_size])[0] for s in range(0, x.shape[0], batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.spec.n_classes))

    # -- training --------------------------------------------------------

    def backward(self, cache: ForwardCache, dlogits) -> tuple["OrderedDict[str, np.ndarray]", np.ndarray]:
        """Gradients of the loss for every named parameter, given ``dLoss/dlogits``.

        Also returns the gradient with respect to the model input.
        """
        spec = self.spec
        batch = cache.x.shape[0]
        head_g, d_head_in = L.dense_backward(self.head, cache.head_in, "none", dlogits)
        if spec.parallel:
            vit_width = cache.vit_flat.shape[1]
            (emb_g, se_g, ln_g), dx_vit = L.vit_se_block_backward(
                self.embed, self.se, self.ln, cache.vit, d_head_in[:, :vit_width]
            )
            dseq = d_head_in[:, vit_width:].reshape(cache.bilstm_seq.shape)
            bil_g, dx_bil = L.bilstm_backward(self.bilstm, cache.bilstm, dseq)
            dx = dx_vit + dx_bil
        elif spec.variant == "Seq_ViT_then_BiLSTM":
            dseq = d_head_in.reshape(cache.bilstm_seq.shape)
            bil_g, dtokens = L.bilstm_backward(self.bilstm, cache.bilstm, dseq)
            (emb_g, se_g, ln_g), dx = L.vit_se_block_backward(
                self.embed, self.se, self.ln, cache.vit, dtokens.reshape(batch, -1)
            )
        else:
            (emb_g, se_g, ln_g), dseq = L.vit_se_block_backward(
                self.embed, self.se, self.ln, cache.vit, d_head_in
            )
            bil_g, dx = L.bilstm_backward(self.bilstm, cache.bilstm, dseq)
        grads = OrderedDict()
        grads.update(emb_g.named_arrays("vit.embed."))
        grads.update(se_g.named_arrays("vit.se."))
        grads.update(ln_g.named_arrays("vit.ln."))
        grads.update(bil_g.named_arrays("bilstm."))
        grads.update(head_g.named_arrays("head."))
        return grads, dx


def predict_from_scores(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=1).astype(np.int64)


def build_model(spec: ModelSpec, rng: np.random.Generator) -> Model:
    """Initialise every parameter of ``spec`` from ``rng`` in a fixed order."""
    if spec.parallel or spec.variant == "Seq_ViT_then_BiLSTM":
        vit_in = spec.input_channels
    else:
        vit_in = 2 * spec.hidden
    if spec.variant == "Seq_ViT_then_BiLSTM":
        lstm_in = spec.embed
    else:
        lstm_in = spec.input_channels
    embed = L.init_dense(rng, vit_in, spec.embed)
    se = L.init_se(rng, spec.embed, spec.se_ratio)
    ln = L.init_layer_norm(spec.embed)
    bilstm = L.init_bilstm(rng, lstm_in, spec.hidden)
    head = L.init_dense(rng, spec.head_inputs, spec.n_classes)
    return Model(spec, embed, se, ln, bilstm, head)


def forward(model: Model, x) -> tuple[np.ndarray, ForwardCache]:
    return model.forward(x)


def predict(model: Model, x) -> np.ndarray:
    return model.predict(x)


def count_params(model: Model) -> int:
    return sum(a.size for a in model.named_parameters().values())


def save_model(model: Model, path) -> None:
    header = json.dumps(
        {"format_version": WEIGHTS_FORMAT_VERSION, "spec": model.spec.to_dict()}, sort_keys=True
    )
    arrays = {"__spec__": np.array(header)}
    arrays.update(model.named_parameters())
    write_npz(path, arrays)


def load_model(path) -> Model:
    data = read_npz(path)
    if "__spec__" not in data:
        raise ConfigError(f"{path}: not a weights file (missing __spec__)")
    header = json.loads(str(data.pop("__spec__")))
    if header.get("format_version") != WEIGHTS_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported weights format {header.get('format_version')!r}")
    model = build_model(ModelSpec(**header["spec"]), make_rng(0))
    params = model.named_parameters()
    if list(data) != list(params):
        raise ShapeError(f"{path}: parameter names do not match the stored spec")
    for name, arr in params.items():
        stored = data[name]
        if stored.shape != arr.shape:
            raise ShapeError(f"{path}: {name} has shape {stored.shape}, spec implies {arr.shape}")
        arr[...] = stored
    return model
