"""Command-line entry point: ``sevit-ids <command> [options]``.

Commands share a run directory (``--out``; default ``runs/<UTC timestamp>``):

* ``preprocess``  CSV + schema -> ``data/train.npz``, ``data/val.npz``, ``preprocess_summary.json``
* ``train``       -> ``model.npz``, ``history.csv``, ``train_summary.json``
* ``evaluate``    -> ``report.json``, ``report.txt``, ``confusion_matrix.csv``,
  ``roc/roc_class_<c>.csv``, ``latency.json``
* ``ablate``      trains variants 1-4 -> ``ablation.csv``, ``ablation.txt``
* ``benchmark``   -> ``latency.json``
* ``synth``       writes a synthetic Gaussian-blob CSV and matching schema

Settings come from ``--config`` (a JSON object whose keys are ``RunConfig``
fields) and are overridden by flags.  Each command echoes its resolved
settings to ``config.<command>.json`` in the run directory.

Exit codes: 0 success, 1 unexpected failure, 2 usage error, 3 config error,
4 data error, 5 shape error, 6 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import datapipe, evalkit, synthetic
from .datapipe import Dataset, SchemaConfig
from .errors import ConfigError, DataError, SevitError, ShapeError
from .model import VARIANTS, ModelSpec, build_model, load_model, resolve_variant, save_model
from .numkernel import make_rng
from .trainer import TrainConfig, cross_entropy, train

log = logging.getLogger("sevit_ids")

VARIANT_DESCRIPTIONS = {
    1: "ViT features passed to a BiLSTM sequentially",
    2: "BiLSTM features passed to a ViT sequentially",
    3: "ViT and BiLSTM run in parallel, then fused",
    4: "ViT and BiLSTM (64 units) run in parallel, then fused",
}


@dataclass
class RunConfig:
    dataset: Optional[str] = None
    schema: Optional[str] = None
    dataset_name: Optional[str] = None
    balance: str = "none"
    balance_order: str = "before_split"
    train_fraction: float = 0.8
    scale: bool = True
    smote_k: int = 5
    variant: int = 3
    steps: Optional[int] = None
    embed: int = 32
    se_ratio: int = 4
    hidden: Optional[int] = None
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    shuffle: bool = True
    warmup: int = 10
    reps: int = 1000
    out: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.balance not in datapipe.BALANCE_MODES:
            raise ConfigError(f"balance: expected one of {datapipe.BALANCE_MODES}, got {self.balance!r}")
        if self.balance_order not in datapipe.BALANCE_ORDERS:
            raise ConfigError(
                f"balance_order: expected one of {datapipe.BALANCE_ORDERS}, got {self.balance_order!r}"
            )
        if not 0.0 < float(self.train_fraction) < 1.0:
            raise ConfigError(f"train_fraction: must lie in (0, 1), got {self.train_fraction}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed: must be an unsigned 64-bit integer, got {self.seed}")
        self.variant = _variant_number(self.variant)

    @classmethod
    def from_sources(cls, config_path: Optional[str], overrides: dict) -> "RunConfig":
        values = {}
        if config_path:
            try:
                with open(config_path, encoding="utf-8") as fh:
                    values = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
            if not isinstance(values, dict):
                raise ConfigError(f"config {config_path} must hold a JSON object")
            known = {f.name for f in fields(cls)}
            unknown = sorted(set(values) - known)
            if unknown:
                raise ConfigError(f"config {config_path}: unknown keys {unknown}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps_adam=self.eps_adam,
            seed=_subseed(self.seed, 2),
            shuffle=self.shuffle,
        )

    def model_spec(self, train_ds: Dataset, variant: Optional[int] = None) -> ModelSpec:
        n_features = train_ds.features.shape[1]
        if self.steps is not None and self.steps != n_features:
            raise ShapeError(
                f"steps={self.steps} in the config but the data has {n_features} features"
            )
        return ModelSpec(
            variant=resolve_variant(variant if variant is not None else self.variant),
            steps=n_features,
            input_channels=1,
            embed=self.embed,
            se_ratio=self.se_ratio,
            hidden=self.hidden,
            n_classes=train_ds.n_classes,
        )


def _variant_number(value) -> int:
    name = resolve_variant(value)
    return next(num for num, v in VARIANTS.items() if v == name)


def _subseed(seed: int, stream: int) -> int:
    return (int(seed) + stream) % 2**64


# ---------------------------------------------------------------------------
# run directory helpers


def run_dir(cfg: RunConfig) -> Path:
    if cfg.out is None:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        cfg.out = str(Path("runs") / stamp)
    path = Path(cfg.out)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc}") from exc
    return path


def _echo_config(out: Path, command: str, cfg: RunConfig) -> None:
    _write_json(out / f"config.{command}.json", asdict(cfg))


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _load_split(out: Path) -> tuple[Dataset, Dataset]:
    train_path, val_path = out / "data" / "train.npz", out / "data" / "val.npz"
    if not train_path.is_file() or not val_path.is_file():
        raise DataError(f"no preprocessed data under {out / 'data'}; run `preprocess` first")
    return Dataset.load(train_path), Dataset.load(val_path)


def _load_weights(out: Path):
    path = out / "model.npz"
    if not path.is_file():
        raise DataError(f"no weights at {path}; run `train` first")
    return load_model(path)


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig) -> dict:
    if not cfg.dataset or not cfg.schema:
        raise ConfigError("preprocess needs both dataset and schema")
    out = run_dir(cfg)
    _echo_config(out, "preprocess", cfg)
    schema = SchemaConfig.load(cfg.schema)
    train_ds, val_ds, summary = datapipe.prepare(
        cfg.dataset,
        schema,
        balance_mode=cfg.balance,
        balance_order=cfg.balance_order,
        train_fraction=cfg.train_fraction,
        scale=cfg.scale,
        smote_k=cfg.smote_k,
        seed=_subseed(cfg.seed, 0),
    )
    (out / "data").mkdir(exist_ok=True)
    train_ds.save(out / "data" / "train.npz")
    val_ds.save(out / "data" / "val.npz")
    summary["dataset"] = cfg.dataset_name or Path(cfg.dataset).stem
    summary["balance"] = cfg.balance
    summary["balance_order"] = cfg.balance_order
    _write_json(out / "preprocess_summary.json", summary)
    log.info(
        "preprocessed %d rows (%d dropped): train %d, val %d",
        summary["rows_read"],
        summary["rows_dropped"],
        summary["train_size"],
        summary["val_size"],
    )
    return summary


def _train_variant(cfg: RunConfig, train_ds: Dataset, val_ds: Dataset, variant: Optional[int] = None):
    spec = cfg.model_spec(train_ds, variant)
    model = build_model(spec, make_rng(_subseed(cfg.seed, 1)))
    return train(model, train_ds, val_ds, cfg.train_config(), log=log.info)


def cmd_train(cfg: RunConfig) -> dict:
    out = run_dir(cfg)
    _echo_config(out, "train", cfg)
    train_ds, val_ds = _load_split(out)
    model, history = _train_variant(cfg, train_ds, val_ds)
    save_model(model, out / "model.npz")
    history.to_csv(out / "history.csv")
    summary = {
        "spec": model.spec.to_dict(),
        "n_params": model.count_params(),
        "epochs": len(history),
        "final_train_loss": history.train_loss[-1],
        "final_train_accuracy": history.train_accuracy[-1],
        "final_val_loss": history.val_loss[-1],
        "final_val_accuracy": history.val_accuracy[-1],
    }
    _write_json(out / "train_summary.json", summary)
    return summary


def _evaluate_model(model, ds: Dataset) -> evalkit.EvalReport:
    if ds.features.shape[1] != model.spec.steps or ds.n_classes != model.spec.n_classes:
        raise ShapeError(
            f"weights expect {model.spec.steps} features and {model.spec.n_classes} classes; "
            f"data has {ds.features.shape[1]} and {ds.n_classes}"
        )
    probs = model.predict_proba(ds.as_tokens())
    loss, _ = cross_entropy(probs, ds.labels)
    report = evalkit.evaluate(probs, ds.labels, ds.class_names, loss)
    if report.report.accuracy != float(evalkit.accuracy_from_cm(report.confusion)):
        raise SevitError("internal check failed: accuracy disagrees with the confusion matrix")
    return report


def cmd_evaluate(cfg: RunConfig) -> dict:
    out = run_dir(cfg)
    _echo_config(out, "evaluate", cfg)
    _, val_ds = _load_split(out)
    model = _load_weights(out)
    report = _evaluate_model(model, val_ds)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    with open(out / "confusion_matrix.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\pred"] + list(val_ds.class_names))
        for name, row in zip(val_ds.class_names, report.confusion):
            writer.writerow([name] + [int(v) for v in row])
    roc_dir = out / "roc"
    roc_dir.mkdir(exist_ok=True)
    for c, curve in sorted(report.roc.items()):
        curve.to_csv(roc_dir / f"roc_class_{c}.csv")
    latency = evalkit.latency_benchmark(model, val_ds.as_tokens(), cfg.warmup, cfg.reps)
    _write_json(out / "latency.json", latency.to_dict())
    log.info("accuracy %.4f  macro FPR %.6f  latency %.3g s/instance",
             report.report.accuracy, report.report.macro_fpr, latency.mean_seconds)
    return report.to_dict()


def cmd_benchmark(cfg: RunConfig) -> dict:
    out = run_dir(cfg)
    _echo_config(out, "benchmark", cfg)
    _, val_ds = _load_split(out)
    model = _load_weights(out)
    latency = evalkit.latency_benchmark(model, val_ds.as_tokens(), cfg.warmup, cfg.reps)
    _write_json(out / "latency.json", latency.to_dict())
    log.info("mean latency %.3g s/instance over %d instances", latency.mean_seconds, latency.instances)
    return latency.to_dict()


ABLATION_COLUMNS = ["id", "variant", "description", "dataset", "accuracy", "loss", "fpr"]


def cmd_ablate(cfg: RunConfig) -> list[dict]:
    out = run_dir(cfg)
    _echo_config(out, "ablate", cfg)
    train_ds, val_ds = _load_split(out)
    dataset_name = cfg.dataset_name
    if dataset_name is None:
        summary_path = out / "preprocess_summary.json"
        if summary_path.is_file():
            dataset_name = json.loads(summary_path.read_text()).get("dataset")
    dataset_name = dataset_name or "dataset"
    rows = []
    for number, name in VARIANTS.items():
        log.info("ablation: training variant #%d %s", number, name)
        hidden = None if cfg.hidden is None or number == 4 else cfg.hidden
        variant_cfg = RunConfig(**{**asdict(cfg), "hidden": hidden})
        model, _ = _train_variant(variant_cfg, train_ds, val_ds, number)
        report = _evaluate_model(model, val_ds)
        rows.append(
            {
                "id": f"#{number}",
                "variant": name,
                "description": VARIANT_DESCRIPTIONS[number],
                "dataset": dataset_name,
                "accuracy": report.report.accuracy,
                "loss": report.loss,
                "fpr": report.report.macro_fpr,
            }
        )
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    (out / "ablation.txt").write_text(format_ablation(rows), encoding="utf-8")
    return rows


def format_ablation(rows: list[dict]) -> str:
    lines = [f"{'#':<3} {'variant':<20} {'dataset':<14} {'Acc (%)':>9} {'Loss':>9} {'FPR (%)':>9}"]
    for r in rows:
        lines.append(
            f"{r['id']:<3} {r['variant']:<20} {r['dataset']:<14} {100 * r['accuracy']:>9.2f} "
            f"{r['loss']:>9.4f} {100 * r['fpr']:>9.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_synth(args) -> None:
    ds = synthetic.make_blobs(args.rows, args.features, args.classes, seed=args.seed, spread=args.spread)
    synthetic.write_csv(ds, args.csv)
    synthetic.write_schema(args.schema, class_names=ds.class_names)
    log.info("wrote %d rows to %s and schema %s", len(ds), args.csv, args.schema)


# ---------------------------------------------------------------------------
# argument parsing

COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "benchmark": cmd_benchmark,
}


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of RunConfig fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--balance", choices=datapipe.BALANCE_MODES)
    common.add_argument("--balance-order", dest="balance_order", choices=datapipe.BALANCE_ORDERS)
    common.add_argument("--variant", type=int, choices=sorted(VARIANTS))
    common.add_argument("--out", help="run directory (default: runs/<UTC timestamp>)")
    common.add_argument("--dataset", help="input CSV")
    common.add_argument("--schema", help="schema JSON")
    common.add_argument("--dataset-name", dest="dataset_name")
    common.add_argument("--train-fraction", dest="train_fraction", type=float)
    common.add_argument("--scale", type=_bool, help="min-max scale features (default true)")
    common.add_argument("--smote-k", dest="smote_k", type=int)
    common.add_argument("--steps", type=int, help="expected feature count; checked against the data")
    common.add_argument("--embed", type=int)
    common.add_argument("--se-ratio", dest="se_ratio", type=int)
    common.add_argument("--hidden", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--learning-rate", dest="learning_rate", type=float)
    common.add_argument("--warmup", type=int)
    common.add_argument("--reps", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sevit-ids", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=COMMANDS[name].__name__.replace("cmd_", ""))
    synth = sub.add_parser("synth", help="write a synthetic Gaussian-blob CSV and schema")
    synth.add_argument("--csv", required=True)
    synth.add_argument("--schema", required=True)
    synth.add_argument("--rows", type=int, default=3000)
    synth.add_argument("--features", type=int, default=20)
    synth.add_argument("--classes", type=int, default=6)
    synth.add_argument("--spread", type=float, default=0.3)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("-v", "--verbose", action="store_true")
    return parser


_OVERRIDE_KEYS = [f.name for f in fields(RunConfig)]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "synth":
            cmd_synth(args)
            return 0
        overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
        cfg = RunConfig.from_sources(args.config, overrides)
        result = COMMANDS[args.command](cfg)
        if args.command == "ablate":
            sys.stdout.write(format_ablation(result))
        print(f"run directory: {cfg.out}")
        return 0
    except SevitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # bad field types coming from the config file
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
