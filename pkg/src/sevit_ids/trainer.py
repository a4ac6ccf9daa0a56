"""Mini-batch training with categorical cross-entropy and bias-corrected Adam."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .datapipe import Dataset
from .errors import ConfigError, DataError, ShapeError
from .model import Model
from .numkernel import make_rng

EPS_LOG = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if int(self.batch_size) < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate: must be >= 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name}: must lie in (0, 1), got {getattr(self, name)}")
        if not self.eps_adam > 0:
            raise ConfigError(f"eps_adam: must be > 0, got {self.eps_adam}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def rows(self):
        for i in range(len(self)):
            yield (i + 1, self.train_loss[i], self.train_accuracy[i], self.val_loss[i], self.val_accuracy[i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
            for epoch, tl, ta, vl, va in self.rows():
                writer.writerow([epoch, repr(tl), repr(ta), repr(vl), repr(va)])


def cross_entropy(probs, labels) -> tuple[float, np.ndarray]:
    """Mean categorical cross-entropy and its gradient with respect to the logits.

    ``probs`` must be the softmax of those logits; the fused gradient is
    ``(probs - onehot) / batch``.  Probabilities are floored at ``EPS_LOG``
    inside the log, so an underflowed probability costs at most -log(EPS_LOG)
    while any ordinary value is scored exactly.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} probability rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    loss = float(-np.log(np.maximum(probs[rows, labels], EPS_LOG)).mean())
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def adam_step(state: AdamState, params: dict, grads: dict, cfg: TrainConfig) -> None:
    """Update ``params`` in place and advance ``state``."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)


def evaluate_loss_accuracy(model: Model, ds: Dataset, batch_size: int = 512) -> tuple[float, float]:
    """Size-weighted mean loss and accuracy over ``ds``."""
    x = ds.as_tokens()
    total_loss = 0.0
    correct = 0
    for start in range(0, len(ds), batch_size):
        xb = x[start : start + batch_size]
        yb = ds.labels[start : start + batch_size]
        probs, _ = model.forward(xb)
        loss, _ = cross_entropy(probs, yb)
        total_loss += loss * yb.size
        correct += int((np.argmax(probs, axis=1) == yb).sum())
    return total_loss / len(ds), correct / len(ds)


def _check_dataset(model: Model, ds: Dataset, what: str) -> None:
    if len(ds) == 0:
        raise DataError(f"{what} dataset is empty")
    if ds.features.shape[1] != model.spec.steps * model.spec.input_channels:
        raise ShapeError(
            f"{what} dataset has {ds.features.shape[1]} features but the model expects "
            f"steps={model.spec.steps}"
        )
    if ds.n_classes != model.spec.n_classes:
        raise ShapeError(f"{what} dataset has {ds.n_classes} classes, model has {model.spec.n_classes}")


def train(
    model: Model,
    train_ds: Dataset,
    val_ds: Dataset,
    cfg: TrainConfig,
    log=None,
) -> tuple[Model, TrainHistory]:
    """Train ``model`` in place and return it with the per-epoch history.

    Each epoch shuffles with a generator seeded from ``cfg.seed``, keeps the
    last short batch, then scores the full train and validation sets.
    """
    _check_dataset(model, train_ds, "training")
    _check_dataset(model, val_ds, "validation")
    rng = make_rng(cfg.seed)
    params = model.named_parameters()
    state = AdamState()
    history = TrainHistory()
    x_all = train_ds.as_tokens()
    n = len(train_ds)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            probs, cache = model.forward(x_all[idx])
            _, dlogits = cross_entropy(probs, train_ds.labels[idx])
            grads, _ = model.backward(cache, dlogits)
            adam_step(state, params, grads, cfg)
        tl, ta = evaluate_loss_accuracy(model, train_ds)
        vl, va = evaluate_loss_accuracy(model, val_ds)
        history.train_loss.append(tl)
        history.train_accuracy.append(ta)
        history.val_loss.append(vl)
        history.val_accuracy.append(va)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {tl:.4f} acc {ta:.4f} val_loss {vl:.4f} val_acc {va:.4f}")
    return model, history
