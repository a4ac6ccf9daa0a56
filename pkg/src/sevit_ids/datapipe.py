"""Flow-record preprocessing: CSV ingestion, encodings, scaling, oversampling, splitting.

Schema config files are JSON objects::

    {
      "label_column": "Attack_type",          # required
      "drop_columns": ["Attack_label", "frame.time"],
      "categorical_columns": ["proto"],
      "class_map": {"Normal": 0, "DDoS_UDP": 1, "DDoS_TCP": 1},   # optional
      "class_names": ["Normal", "DDoS"]                           # optional
    }

``class_map`` may send several raw labels to one code; the codes used must be
exactly ``0..k-1``.  ``class_names`` names the codes; without it a code is
named by its raw labels joined with ``|``.  Without ``class_map`` the classes
are the sorted unique label values.

Every column that is not the label, not dropped and not categorical is parsed
as float64.  Rows holding a non-finite or unparsable value in such a column
are dropped and counted.

Serialized datasets are ``.npz`` archives with ``features`` (float64,
``n x d``), ``labels`` (int64), ``class_names`` and ``feature_names``
(unicode arrays).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._npz import read_npz, write_npz
from .errors import ConfigError, DataError, ShapeError
from .numkernel import make_rng


@dataclass
class SchemaConfig:
    label_column: str
    drop_columns: list[str] = field(default_factory=list)
    categorical_columns: list[str] = field(default_factory=list)
    class_map: Optional[dict[str, int]] = None
    class_names: Optional[list[str]] = None

    def __post_init__(self):
        if self.label_column in self.drop_columns:
            raise ConfigError(f"label_column {self.label_column!r} also listed in drop_columns")
        if self.label_column in self.categorical_columns:
            raise ConfigError(f"label_column {self.label_column!r} also listed in categorical_columns")
        if self.class_map is not None:
            codes = sorted(set(self.class_map.values()))
            if codes != list(range(len(codes))):
                raise ConfigError("class_map: codes must be exactly 0..k-1")
            if self.class_names is not None and len(self.class_names) != len(codes):
                raise ConfigError(f"class_names: expected {len(codes)} names, got {len(self.class_names)}")
        elif self.class_names is not None:
            raise ConfigError("class_names requires class_map")

    @classmethod
    def from_dict(cls, data: dict) -> "SchemaConfig":
        unknown = set(data) - {"label_column", "drop_columns", "categorical_columns", "class_map", "class_names"}
        if unknown:
            raise ConfigError(f"schema: unknown keys {sorted(unknown)}")
        if "label_column" not in data:
            raise ConfigError("schema: label_column is required")
        return cls(
            label_column=data["label_column"],
            drop_columns=list(data.get("drop_columns", [])),
            categorical_columns=list(data.get("categorical_columns", [])),
            class_map=dict(data["class_map"]) if data.get("class_map") is not None else None,
            class_names=list(data["class_names"]) if data.get("class_names") is not None else None,
        )

    @classmethod
    def load(cls, path) -> "SchemaConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read schema {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"schema {path} is not valid JSON: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "label_column": self.label_column,
            "drop_columns": list(self.drop_columns),
            "categorical_columns": list(self.categorical_columns),
            "class_map": self.class_map,
            "class_names": self.class_names,
        }

    def code_names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        k = len(set(self.class_map.values()))
        return ["|".join(sorted(r for r, c in self.class_map.items() if c == code)) for code in range(k)]


@dataclass
class RawTable:
    columns: list[str]
    data: dict[str, list[str]]
    n_dropped: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.data[self.columns[0]]) if self.columns else 0


@dataclass(eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    feature_names: list[str]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.features.shape[1] != len(self.feature_names):
            raise ShapeError(
                f"{self.features.shape[1]} feature columns but {len(self.feature_names)} names"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("labels out of range for the class list")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], list(self.class_names), list(self.feature_names))

    def as_tokens(self) -> np.ndarray:
        """Model input view: each feature becomes one step with one channel."""
        return self.features[:, :, None]

    def save(self, path) -> None:
        write_npz(
            path,
            {
                "features": self.features,
                "labels": self.labels,
                "class_names": np.array(self.class_names, dtype=str),
                "feature_names": np.array(self.feature_names, dtype=str),
            },
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        try:
            data = read_npz(path)
        except OSError as exc:
            raise DataError(f"cannot read dataset {path}: {exc}") from exc
        return cls(
            data["features"],
            data["labels"],
            [str(s) for s in data["class_names"]],
            [str(s) for s in data["feature_names"]],
        )


# ---------------------------------------------------------------------------
# ingestion and encoding


def _numeric_columns(columns: list[str], schema: SchemaConfig) -> list[str]:
    skip = set(schema.drop_columns) | set(schema.categorical_columns) | {schema.label_column}
    return [c for c in columns if c not in skip]


def load_csv(path, schema: SchemaConfig) -> RawTable:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise DataError(f"{path}: label column {schema.label_column!r} not in header")
        missing = [c for c in schema.categorical_columns if c not in header]
        if missing:
            raise ConfigError(f"{path}: categorical columns missing from header: {missing}")
        numeric = set(_numeric_columns(header, schema))
        numeric_pos = [i for i, c in enumerate(header) if c in numeric]
        rows = []
        dropped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}:{line_no}: expected {len(header)} fields, found {len(row)}"
                )
            ok = True
            for i in numeric_pos:
                try:
                    if not math.isfinite(float(row[i])):
                        ok = False
                        break
                except ValueError:
                    ok = False
                    break
            if ok:
                rows.append(row)
            else:
                dropped += 1
    data = {c: [r[i] for r in rows] for i, c in enumerate(header)}
    return RawTable(header, data, dropped)


def encode_labels(raw: RawTable, schema: SchemaConfig) -> tuple[np.ndarray, list[str]]:
    if schema.label_column not in raw.data:
        raise DataError(f"label column {schema.label_column!r} missing")
    values = [v.strip() for v in raw.data[schema.label_column]]
    if schema.class_map is not None:
        class_names = schema.code_names()
        lookup = schema.class_map
    else:
        class_names = sorted(set(values))
        lookup = {name: i for i, name in enumerate(class_names)}
    labels = np.empty(len(values), dtype=np.int64)
    for i, v in enumerate(values):
        try:
            labels[i] = lookup[v]
        except KeyError:
            raise DataError(f"label {v!r} is not in the class map") from None
    return labels, class_names


def encode_categoricals(raw: RawTable, schema: SchemaConfig) -> tuple[np.ndarray, dict[str, list[str]]]:
    """Sorted-unique integer codes for each categorical column, fitted on the whole table."""
    columns = []
    vocab = {}
    for name in schema.categorical_columns:
        if name not in raw.data:
            raise ConfigError(f"categorical column {name!r} missing from the table")
        values = raw.data[name]
        levels = sorted(set(values))
        index = {v: i for i, v in enumerate(levels)}
        columns.append(np.array([index[v] for v in values], dtype=np.float64))
        vocab[name] = levels
    if not columns:
        return np.zeros((raw.n_rows, 0)), vocab
    return np.stack(columns, axis=1), vocab


def to_dataset(raw: RawTable, schema: SchemaConfig) -> Dataset:
    """Assemble features in header order, categoricals replaced by their codes."""
    if raw.n_rows == 0:
        raise DataError("table has no rows")
    labels, class_names = encode_labels(raw, schema)
    cat_codes, _ = encode_categoricals(raw, schema)
    cat_pos = {name: j for j, name in enumerate(schema.categorical_columns)}
    numeric = set(_numeric_columns(raw.columns, schema))
    cols, names = [], []
    for name in raw.columns:
        if name in cat_pos:
            cols.append(cat_codes[:, cat_pos[name]])
        elif name in numeric:
            cols.append(np.array(raw.data[name], dtype=np.float64))
        else:
            continue
        names.append(name)
    if not cols:
        raise DataError("no feature columns left after dropping label and drop_columns")
    return Dataset(np.stack(cols, axis=1), labels, class_names, names)


# ---------------------------------------------------------------------------
# scaling


@dataclass(eq=False)
class ScalerState:
    minimum: np.ndarray
    maximum: np.ndarray


def scale_fit(features) -> ScalerState:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise DataError("scale_fit needs a non-empty 2-D feature matrix")
    return ScalerState(features.min(axis=0), features.max(axis=0))


def scale_apply(state: Optional[ScalerState], features) -> np.ndarray:
    """Min-max scale with the fitted range; constant features map to 0, no clipping."""
    if state is None:
        raise DataError("scaler applied before it was fitted")
    features = np.asarray(features, dtype=np.float64)
    span = state.maximum - state.minimum
    safe = np.where(span > 0, span, 1.0)
    out = (features - state.minimum) / safe
    out[:, span == 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# oversampling


def _check_nonempty_classes(ds: Dataset) -> np.ndarray:
    counts = ds.class_counts()
    empty = [ds.class_names[c] for c in np.flatnonzero(counts == 0)]
    if empty:
        raise DataError(f"classes with no instances: {empty}")
    return counts


def random_oversample(ds: Dataset, rng: np.random.Generator) -> Dataset:
    """Duplicate minority rows, drawn uniformly with replacement, up to the majority count.

    Original rows come first, in their original order; copies follow, grouped
    by class index.
    """
    counts = _check_nonempty_classes(ds)
    target = counts.max()
    extra = []
    for c in range(ds.n_classes):
        need = target - counts[c]
        if need:
            members = np.flatnonzero(ds.labels == c)
            extra.append(members[rng.integers(0, members.size, size=need)])
    if not extra:
        return ds.subset(np.arange(len(ds)))
    return ds.subset(np.concatenate([np.arange(len(ds))] + extra))


def _nearest_neighbours(points: np.ndarray, queries: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Indices of the ``k`` nearest ``points`` to each query row, excluding the query itself.

    ``queries`` are indices into ``points``.  Ties keep the lower index.
    """
    sq = (points**2).sum(axis=1)
    out = np.empty((queries.size, k), dtype=np.int64)
    for start in range(0, queries.size, chunk):
        q = queries[start : start + chunk]
        d2 = sq[q, None] - 2.0 * points[q] @ points.T + sq[None, :]
        d2[np.arange(q.size), q] = np.inf
        out[start : start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def smote(ds: Dataset, k: int, rng: np.random.Generator) -> Dataset:
    """Synthesize minority rows by interpolating toward same-class nearest neighbours.

    Each synthetic row is ``x + lam * (nn - x)`` with ``x`` a uniformly drawn
    class member, ``nn`` one of its ``k`` nearest same-class neighbours
    (Euclidean, ``k`` clamped to ``class_size - 1``) and ``lam ~ U[0, 1)``.
    """
    if k < 1:
        raise ConfigError(f"smote k must be >= 1, got {k}")
    counts = _check_nonempty_classes(ds)
    target = counts.max()
    feats, labs = [ds.features], [ds.labels]
    for c in range(ds.n_classes):
        need = int(target - counts[c])
        if need == 0:
            continue
        if counts[c] < 2:
            raise DataError(
                f"class {ds.class_names[c]!r} has a single instance; SMOTE needs two, "
                "use random oversampling instead"
            )
        members = ds.features[ds.labels == c]
        kk = min(k, members.shape[0] - 1)
        base = rng.integers(0, members.shape[0], size=need)
        pick = rng.integers(0, kk, size=need)
        lam = rng.random(size=need)
        uniq, inverse = np.unique(base, return_inverse=True)
        neighbours = _nearest_neighbours(members, uniq, kk)
        partner = neighbours[inverse, pick]
        x = members[base]
        feats.append(x + lam[:, None] * (members[partner] - x))
        labs.append(np.full(need, c, dtype=np.int64))
    return Dataset(np.concatenate(feats), np.concatenate(labs), list(ds.class_names), list(ds.feature_names))


# ---------------------------------------------------------------------------
# splitting


def stratified_split(ds: Dataset, train_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Shuffle each class and send ``round(fraction * count)`` of it (half rounds up) to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    _check_nonempty_classes(ds)
    train_idx, val_idx = [], []
    for c in range(ds.n_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        n_train = int(math.floor(train_fraction * members.size + 0.5))
        train_idx.append(members[:n_train])
        val_idx.append(members[n_train:])
    return ds.subset(np.concatenate(train_idx)), ds.subset(np.concatenate(val_idx))


# ---------------------------------------------------------------------------
# end-to-end


BALANCE_MODES = ("none", "smote", "random")
BALANCE_ORDERS = ("before_split", "train_only")


def balance(ds: Dataset, mode: str, rng: np.random.Generator, k: int = 5) -> Dataset:
    if mode == "none":
        return ds
    if mode == "smote":
        return smote(ds, k, rng)
    if mode == "random":
        return random_oversample(ds, rng)
    raise ConfigError(f"balance: unknown mode {mode!r}; expected one of {BALANCE_MODES}")


def prepare(
    path,
    schema: SchemaConfig,
    *,
    balance_mode: str = "none",
    balance_order: str = "before_split",
    train_fraction: float = 0.8,
    scale: bool = True,
    smote_k: int = 5,
    seed: int = 0,
) -> tuple[Dataset, Dataset, dict]:
    """Run ingestion through splitting; returns ``(train, val, summary)``.

    ``before_split`` balances the full table and then splits it;
    ``train_only`` splits first and balances only the training part, with
    the scaler fitted on training rows.
    """
    if balance_mode not in BALANCE_MODES:
        raise ConfigError(f"balance: unknown mode {balance_mode!r}; expected one of {BALANCE_MODES}")
    if balance_order not in BALANCE_ORDERS:
        raise ConfigError(f"balance_order: unknown value {balance_order!r}; expected one of {BALANCE_ORDERS}")
    rng = make_rng(seed)
    raw = load_csv(path, schema)
    ds = to_dataset(raw, schema)
    summary = {
        "rows_read": raw.n_rows + raw.n_dropped,
        "rows_dropped": raw.n_dropped,
        "n_features": len(ds.feature_names),
        "class_names": list(ds.class_names),
        "class_counts_before": ds.class_counts().tolist(),
    }
    if balance_order == "before_split":
        if scale:
            ds.features = scale_apply(scale_fit(ds.features), ds.features)
        ds = balance(ds, balance_mode, rng, smote_k)
        summary["class_counts_after"] = ds.class_counts().tolist()
        train, val = stratified_split(ds, train_fraction, rng)
    else:
        train, val = stratified_split(ds, train_fraction, rng)
        if scale:
            state = scale_fit(train.features)
            train.features = scale_apply(state, train.features)
            val.features = scale_apply(state, val.features)
        train = balance(train, balance_mode, rng, smote_k)
        summary["class_counts_after"] = train.class_counts().tolist()
    summary["train_size"] = len(train)
    summary["val_size"] = len(val)
    summary["train_class_counts"] = train.class_counts().tolist()
    summary["val_class_counts"] = val.class_counts().tolist()
    return train, val, summary
