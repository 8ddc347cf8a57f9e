"""Command-line entry point: gen-data, train, eval, ablate, inspect-noise-matrix."""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import ConfigError, ShapeError
from .data import DatasetParseError, ShiftSpec, load_bundle, make_bundle, save_bundle
from .metrics import MetricsReport, compute_metrics, estimated_Q, q_error, write_report
from .model import Architecture, build_model
from .objectives import DIVERSITY_METRICS, DOMAIN_LOSS_KINDS, WEIGHT_METRICS
from .training import (
    COMPONENTS,
    ENSEMBLES,
    NumericalError,
    TrainConfig,
    infer,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # data
    k: int = 3
    dim: int = 2
    per_class: int = 200
    rot: float = 30.0  # degrees
    translation: tuple[float, ...] = ()
    scale: float = 1.0
    spread: float = 0.5
    separation: float = 2.0
    noise: float = 0.1
    p_class: float = 0.0
    # model
    extractor_widths: tuple[int, ...] = (32, 16)
    disc_hidden: tuple[int, ...] = (16, 16)
    # training
    alpha: float = 0.1
    eta: float = 0.01
    gamma: float = 2.0
    eps_init: float = 0.8
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    weight_metric: str = "cosine"
    diversity_metric: str = "js"
    domain_loss_kind: str = "least_squares"
    ensemble: str = "average"
    log_every: int = 50
    transfer_weighting: bool = True
    use_noise_layer: bool = True
    # paths
    dataset: str = "dataset.csv"
    output: str = ""
    out_dir: str = ""
    checkpoint: str = ""
    curves: str = ""
    report: str = ""
    # ablation grid, comma-separated
    weight_metrics: tuple[str, ...] = ("cosine",)
    diversity_metrics: tuple[str, ...] = ("js",)
    domain_losses: tuple[str, ...] = ("least_squares",)
    ensembles: tuple[str, ...] = ("average",)
    components: tuple[str, ...] = ()
    seeds: tuple[int, ...] = ()

    def shift_spec(self) -> ShiftSpec:
        return ShiftSpec(
            n_classes=self.k,
            dim=self.dim,
            per_class=self.per_class,
            rotation=math.radians(self.rot),
            translation=tuple(self.translation),
            scale=self.scale,
            spread=self.spread,
            separation=self.separation,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{n: getattr(self, n) for n in names})

    def architecture(self, in_dim: int, n_classes: int) -> Architecture:
        return Architecture(in_dim, n_classes, tuple(self.extractor_widths), tuple(self.disc_hidden))


def flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _converter(annotation: str):
    if annotation == "bool":
        return _parse_bool
    if annotation.startswith("tuple[int"):
        return lambda s: tuple(int(v) for v in s.split(",") if v.strip())
    if annotation.startswith("tuple[float"):
        return lambda s: tuple(float(v) for v in s.split(",") if v.strip())
    if annotation.startswith("tuple[str"):
        return lambda s: tuple(v.strip() for v in s.split(",") if v.strip())
    return {"int": int, "float": float, "str": str}[annotation]


CONVERTERS = {f.name: _converter(f.type) for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in CONVERTERS:
            raise UsageError(f"{path}:{no}: unknown or malformed entry {raw.strip()!r}")
        try:
            out[key] = CONVERTERS[key](value.strip())
        except ValueError as exc:
            raise UsageError(f"{path}:{no}: {key}: {exc}") from None
    return out


def resolve(flags: dict, config_path: str | None = None, env=None) -> RunConfig:
    """Defaults, then COUDA_SEED, then the config file, then explicit flags."""
    env = os.environ if env is None else env
    values: dict = {}
    if "COUDA_SEED" in env:
        try:
            values["seed"] = int(env["COUDA_SEED"])
        except ValueError:
            raise UsageError(f"COUDA_SEED must be an integer, got {env['COUDA_SEED']!r}") from None
    if config_path:
        values.update(read_config_file(config_path))
    values.update(flags)
    rc = replace(RunConfig(), **values)
    validate(rc)
    return rc


def validate(rc: RunConfig) -> None:
    checks = [
        ("noise", 0.0 <= rc.noise < 1.0, "noise rate must lie in [0, 1)"),
        ("p_class", 0.0 <= rc.p_class <= 1.0, "must lie in [0, 1]"),
        ("k", rc.k >= 2, "need at least 2 classes"),
        ("dim", rc.dim >= 2, "must be >= 2"),
        ("per_class", rc.per_class >= 1, "must be >= 1"),
        ("spread", rc.spread > 0, "must be positive"),
        ("scale", rc.scale > 0, "must be positive"),
        ("translation", not rc.translation or len(rc.translation) == rc.dim, f"needs {rc.dim} comma-separated values"),
        ("eps_init", 0.0 < rc.eps_init < 1.0, "must lie in (0, 1)"),
        ("alpha", rc.alpha >= 0, "must be >= 0"),
        ("eta", rc.eta >= 0, "must be >= 0"),
        ("gamma", rc.gamma >= 0, "must be >= 0"),
        ("learning_rate", rc.learning_rate >= 0, "must be >= 0"),
        ("batch_size", rc.batch_size >= 1, "must be >= 1"),
        ("steps", rc.steps >= 1, "must be >= 1"),
        ("log_every", rc.log_every >= 1, "must be >= 1"),
        ("extractor_widths", len(rc.extractor_widths) >= 1 and min(rc.extractor_widths) > 0, "need positive widths"),
        ("disc_hidden", len(rc.disc_hidden) == 2 and min(rc.disc_hidden) > 0, "need two positive widths"),
    ]
    for name, ok, msg in checks:
        if not ok:
            raise UsageError(f"{flag(name)}: {msg}")
    choices = [
        ("weight_metric", (rc.weight_metric,), WEIGHT_METRICS),
        ("diversity_metric", (rc.diversity_metric,), DIVERSITY_METRICS),
        ("domain_loss_kind", (rc.domain_loss_kind,), DOMAIN_LOSS_KINDS),
        ("ensemble", (rc.ensemble,), ENSEMBLES),
        ("weight_metrics", rc.weight_metrics, WEIGHT_METRICS),
        ("diversity_metrics", rc.diversity_metrics, DIVERSITY_METRICS),
        ("domain_losses", rc.domain_losses, DOMAIN_LOSS_KINDS),
        ("ensembles", rc.ensembles, ENSEMBLES),
        ("components", rc.components, tuple(COMPONENTS)),
    ]
    for name, given, valid in choices:
        for value in given:
            if value not in valid:
                raise UsageError(f"{flag(name)}: unknown name {value!r}; valid: {', '.join(valid)}")


def echo_config(rc: RunConfig, directory, command: str) -> Path:
    """Write the resolved config as ``resolved_config.<command>.txt``; it replays via ``--config``."""
    path = Path(directory) / f"resolved_config.{command}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{f.name} = {_format(getattr(rc, f.name))}" for f in fields(RunConfig)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _out_dir(rc: RunConfig, fallback: str) -> Path:
    return Path(rc.out_dir) if rc.out_dir else Path(fallback).resolve().parent


def _load_dataset(path: str):
    if not Path(path).is_file():
        raise UsageError(f"--dataset: no such file {path}")
    try:
        return load_bundle(path)
    except DatasetParseError as exc:
        raise UsageError(f"--dataset: {path}: {exc}") from None


def _load_model(path: str):
    if not path or not Path(path).is_file():
        raise UsageError(f"--checkpoint: no such file {path or '(unset)'}")
    try:
        return model_from_checkpoint(path)
    except ValueError as exc:
        raise UsageError(f"--checkpoint: {exc}") from None


def run_training(rc: RunConfig, bundle):
    cfg = rc.train_config()
    model = build_model(rc.architecture(bundle.dim, bundle.n_classes), cfg.seed, cfg.eps_init)
    return train(model, bundle, cfg)


def evaluate(model, bundle, ensemble: str) -> MetricsReport:
    """Target-test metrics plus noise-matrix recovery against the bundle's true matrix."""
    _, labels = infer(model, bundle.target_test_x, ensemble)
    report = compute_metrics(bundle.target_test_y, labels, bundle.n_classes)
    q_est = estimated_Q(model, bundle.source_x)
    report.q_error_maxabs, report.q_error_frobenius = q_error(q_est, bundle.true_Q)
    report.q_estimated, report.q_true = q_est, bundle.true_Q
    return report


def _print_matrix(title: str, q: np.ndarray, out) -> None:
    print(title, file=out)
    for row in q:
        print("  " + " ".join(f"{v:.4f}" for v in row), file=out)


def cmd_gen_data(rc: RunConfig, out=sys.stdout) -> int:
    path = rc.output or rc.dataset
    bundle = make_bundle(rc.shift_spec(), rc.noise, rc.p_class, rc.seed)
    Path(path).resolve().parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, path)
    echo_config(rc, _out_dir(rc, path), "gen-data")
    print(f"K={bundle.n_classes} n_s={bundle.source_x.shape[0]} n_t={bundle.target_x.shape[0]}", file=out)
    _print_matrix("true_Q", bundle.true_Q, out)
    return EXIT_OK


def cmd_train(rc: RunConfig, out=sys.stdout) -> int:
    bundle = _load_dataset(rc.dataset)
    directory = Path(rc.out_dir or ".")
    directory.mkdir(parents=True, exist_ok=True)
    ckpt = rc.checkpoint or str(directory / "model.ckpt")
    curves_path = rc.curves or str(directory / "curves.csv")
    rc = replace(rc, checkpoint=ckpt, curves=curves_path)
    echo_config(rc, directory, "train")
    try:
        model, curves = run_training(rc, bundle)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(model, ckpt)
    curves.save(curves_path)
    print(f"checkpoint {ckpt}\ncurves {curves_path}", file=out)
    return EXIT_OK


def cmd_eval(rc: RunConfig, out=sys.stdout) -> int:
    bundle = _load_dataset(rc.dataset)
    model = _load_model(rc.checkpoint)
    if model.n_classes != bundle.n_classes or model.arch.in_dim != bundle.dim:
        raise UsageError("--checkpoint: model does not match the dataset's K or input width")
    report = evaluate(model, bundle, rc.ensemble)
    report_path = rc.report or str(Path(rc.out_dir or ".") / "report.csv")
    Path(report_path).resolve().parent.mkdir(parents=True, exist_ok=True)
    write_report(report, report_path)
    echo_config(replace(rc, report=report_path), _out_dir(rc, report_path), "eval")
    print(
        f"accuracy={report.accuracy:.4f} macro_f1={report.macro_f1:.4f} q_error_maxabs={report.q_error_maxabs:.4f}",
        file=out,
    )
    return EXIT_OK


def ablation_cells(rc: RunConfig) -> list[tuple[str, RunConfig]]:
    cells = []
    for wm in rc.weight_metrics:
        for dm in rc.diversity_metrics:
            for dl in rc.domain_losses:
                for ens in rc.ensembles:
                    base = replace(rc, weight_metric=wm, diversity_metric=dm, domain_loss_kind=dl, ensemble=ens)
                    cells.append(("grid", base))
    for name in rc.components:
        cells.append((name, replace(rc, **COMPONENTS[name])))
    return cells


ABLATE_COLUMNS = ("variant", "weight_metric", "diversity_metric", "domain_loss_kind", "ensemble", "seed")


def cmd_ablate(rc: RunConfig, out=sys.stdout) -> int:
    cells = ablation_cells(rc)
    if not cells:
        raise UsageError("ablation grid is empty; give at least one value per grid axis or a --components entry")
    bundle = _load_dataset(rc.dataset)
    seeds = rc.seeds or (rc.seed,)
    table = rc.output or str(Path(rc.out_dir or ".") / "ablation.csv")
    Path(table).resolve().parent.mkdir(parents=True, exist_ok=True)
    echo_config(replace(rc, output=table), _out_dir(rc, table), "ablate")
    metric_names = None
    rows = []
    for variant, cell in cells:
        for seed in seeds:
            try:
                model, _ = run_training(replace(cell, seed=seed), bundle)
            except NumericalError as exc:
                print(f"error: {variant} seed {seed}: {exc}", file=sys.stderr)
                return EXIT_NUMERIC
            report = evaluate(model, bundle, cell.ensemble)
            metrics = report.rows()
            metric_names = [m for m, _ in metrics]
            key = (variant, cell.weight_metric, cell.diversity_metric, cell.domain_loss_kind, cell.ensemble, seed)
            rows.append([*key, *(repr(float(v)) for _, v in metrics)])
            print(f"{variant:12s} {cell.weight_metric}/{cell.diversity_metric}/{cell.domain_loss_kind}/{cell.ensemble} "
                  f"seed={seed} accuracy={report.accuracy:.4f}", file=out)
    with open(table, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*ABLATE_COLUMNS, *metric_names])
        writer.writerows(rows)
    print(f"table {table}", file=out)
    return EXIT_OK


def cmd_inspect_noise_matrix(rc: RunConfig, out=sys.stdout) -> int:
    bundle = _load_dataset(rc.dataset)
    model = _load_model(rc.checkpoint)
    q_est = estimated_Q(model, bundle.source_x)
    _print_matrix("estimated_Q", q_est, out)
    _print_matrix("true_Q", bundle.true_Q, out)
    maxabs, fro = q_error(q_est, bundle.true_Q)
    print(f"q_error maxabs={maxabs:.6f} frobenius={fro:.6f}", file=out)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-noise-matrix": cmd_inspect_noise_matrix,
}

ALIASES = {"k": ["--n-classes"], "rot": ["--rotation"], "output": ["-o"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="couda", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value file")
        for f in fields(RunConfig):
            p.add_argument(
                flag(f.name),
                *ALIASES.get(f.name, []),
                dest=f.name,
                default=argparse.SUPPRESS,
                metavar=f.type.split("[")[0].upper(),
            )
    return parser


def main(argv=None, out=sys.stdout) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    raw = vars(args)
    command, config_path = raw.pop("command"), raw.pop("config")
    try:
        flags = {}
        for name, text in raw.items():
            try:
                flags[name] = CONVERTERS[name](text)
            except ValueError as exc:
                raise UsageError(f"{flag(name)}: {exc}") from None
        rc = resolve(flags, config_path)
        return COMMANDS[command](rc, out)
    except (UsageError, ConfigError, ShapeError) as exc:
        print(f"couda {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
