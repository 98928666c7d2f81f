"""Command-line harness: generate, train, evaluate, experiment, sweep.

All tables are tab-separated with one header line. Every command also
writes ``manifest.json`` (or ``<file>.manifest.json`` for ``generate``)
recording the resolved configuration and the sha256 of its inputs.

Configuration precedence: per-dataset defaults < ``--config`` JSON file <
command-line flags. The output root defaults to ``./runs`` and can be
overridden with the ``DRVAE_OUTPUT_ROOT`` environment variable or
``--output-root``.

Exit codes: 0 ok, 2 usage/config, 3 ingestion or schema mismatch,
4 numeric failure, 5 some seeds failed (partial report written).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from drvae import __version__, datagen
from drvae.errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    DrvaeError,
    IngestionError,
    NumericError,
)
from drvae.evaluation import METRICS, evaluate_model, evaluate_predictor, truth_curves
from drvae.experiment import SWEEPABLE, ExperimentConfig, run_experiment, run_sweep
from drvae.fileio import atomic_write_text
from drvae.model import load_checkpoint, save_checkpoint
from drvae.training import LOG_FIELDS, fit, seed_streams

logger = logging.getLogger("drvae")

EXIT_OK, EXIT_USAGE, EXIT_INGEST, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "DRVAE_OUTPUT_ROOT"
METHOD = "DRVAE"

# flag name -> config key (flags default to None so unset ones never override)
CONFIG_FLAGS = {
    "k": int, "covariates": str, "train_fraction": float,
    "hidden_dim": int, "num_layers": int, "epochs": int, "batch_size": int,
    "lr": float, "weight_decay": float,
    "alpha": float, "beta": float, "gamma": float, "delta": float, "lambda": float,
    "d_gamma": int, "d_delta": int, "d_upsilon": int, "d_e": int,
    "n_seeds": int, "base_seed": int, "l": int,
}


# ---------------------------------------------------------------------------
# small I/O helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_tsv(path, header, rows) -> None:
    lines = ["\t".join(header)]
    lines += ["\t".join(_fmt(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def output_root(args) -> Path:
    if args.output_root:
        return Path(args.output_root)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve_config(args, dataset: str | None = None) -> ExperimentConfig:
    file_cfg = load_config_file(getattr(args, "config", None))
    flags = {k: getattr(args, k) for k in CONFIG_FLAGS if getattr(args, k, None) is not None}
    dataset = dataset or getattr(args, "dataset", None) or file_cfg.pop("dataset", None) or "simu"
    file_cfg.pop("dataset", None)
    return ExperimentConfig.defaults(dataset, **{**file_cfg, **flags})


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    config = resolve_config(args)
    ds = datagen.generate(config.dataset, args.seed, k=config.k, covariates=config.covariates,
                          train_fraction=config.train_fraction)
    out = Path(args.out) if args.out else output_root(args) / "data" / f"{ds.name}_seed{args.seed}.tsv"
    datagen.save_dataset(ds, out)
    write_json(f"{out}.manifest.json", {
        "command": "generate",
        "version": __version__,
        "format_version": datagen.FORMAT_VERSION,
        "generator": ds.generator,
        "rows": int(ds.x.shape[0]),
        "columns": int(ds.x.shape[1]),
        "dataset_sha256": sha256(out),
    })
    print(out)
    return EXIT_OK


def _dataset_kind(ds) -> str:
    name = ds.generator.get("name")
    return name if name in ("simu", "ihdp", "news") else "simu"


def cmd_train(args) -> int:
    ds = datagen.load_dataset(args.data)
    config = resolve_config(args, dataset=_dataset_kind(ds))
    model, history = fit(ds, config.latent, config.train, args.seed)
    out = Path(args.out) if args.out else output_root(args) / "train" / f"{ds.name}_seed{args.seed}"
    save_checkpoint(model, out / "model.ckpt")
    write_tsv(out / "train_log.tsv", LOG_FIELDS, [[rec[f] for f in LOG_FIELDS] for rec in history])
    write_json(out / "manifest.json", {
        "command": "train",
        "version": __version__,
        "seed": args.seed,
        "config": config.flat(),
        "dataset": str(args.data),
        "dataset_sha256": sha256(args.data),
        "checkpoint_sha256": sha256(out / "model.ckpt"),
    })
    print(out)
    return EXIT_OK


def _write_metrics(out: Path, metrics: dict) -> None:
    rows = [
        ["amse", metrics["amse"]],
        ["sqrt_mise", float(np.sqrt(metrics["mise"]))],
        ["sqrt_dpe", float(np.sqrt(metrics["dpe"]))],
        ["i_mse", metrics["i_mse"]],
    ]
    write_tsv(out / "metrics.tsv", ["metric", "value"], rows)


def cmd_evaluate(args) -> int:
    ds = datagen.load_dataset(args.data)
    test = ds.test()
    inputs = {"dataset": str(args.data), "dataset_sha256": sha256(args.data)}
    if args.oracle:
        # harness check: the predictor is the noiseless truth itself
        metrics, curves = evaluate_predictor(lambda x, doses: truth_curves(test.oracle, x, doses), test)
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint (or --oracle)")
        model = load_checkpoint(args.checkpoint)
        if model.column_kind != ds.column_kind:
            raise IngestionError(
                f"checkpoint schema ({_schema(model.column_kind)}) does not match "
                f"dataset schema ({_schema(ds.column_kind)})"
            )
        inputs.update(checkpoint=str(args.checkpoint), checkpoint_sha256=sha256(args.checkpoint))
        rng = seed_streams(args.seed)[2]
        metrics, curves = evaluate_model(model, test, args.l or 20, rng)
    out = Path(args.out) if args.out else output_root(args) / "evaluate" / ds.name
    _write_metrics(out, metrics)
    write_tsv(out / "adrf.tsv", ["t", "psi_hat", "psi_true"],
              zip(curves["t"], curves["psi_hat"], curves["psi_true"]))
    write_json(out / "manifest.json", {"command": "evaluate", "version": __version__,
                                       "oracle": bool(args.oracle), "seed": args.seed,
                                       "l": args.l or 20, **inputs})
    print(out)
    return EXIT_OK


def _schema(kinds) -> str:
    n_bin = sum(k == "binary" for k in kinds)
    return f"{len(kinds)} columns, {len(kinds) - n_bin} continuous / {n_bin} binary"


def _write_experiment(out: Path, result, extra_manifest=None) -> None:
    cfg = result.config
    rep = result.report
    if rep is not None:
        write_tsv(out / "report.tsv", ["method", "dataset", "metric", "mean", "std", "n_seeds"],
                  [[METHOD, cfg.dataset_label, m, rep.mean[m], rep.std[m], rep.n_seeds] for m in METRICS])
        write_tsv(out / "per_seed.tsv", ["seed", *METRICS],
                  [[s, *(rep.per_seed[m][i] for m in METRICS)] for i, s in enumerate(rep.seeds)])
        rows = []
        for r in result.results:
            rows += [[r.seed, t, a, b] for t, a, b in zip(r.curves["t"], r.curves["psi_hat"], r.curves["psi_true"])]
        write_tsv(out / "adrf.tsv", ["seed", "t", "psi_hat", "psi_true"], rows)
    write_json(out / "manifest.json", {
        "command": "experiment",
        "version": __version__,
        "config": cfg.flat(),
        "seeds": cfg.seeds,
        "completed_seeds": [r.seed for r in result.results],
        "failed_seeds": {str(k): v for k, v in result.failures.items()},
        "std_valid": None if rep is None else rep.std_valid,
        **(extra_manifest or {}),
    })


def _label(cfg: ExperimentConfig) -> str:
    lat = cfg.latent
    return f"{cfg.dataset_label}_{lat.d_gamma}-{lat.d_delta}-{lat.d_upsilon}-{lat.d_e}"


def cmd_experiment(args) -> int:
    config = resolve_config(args)
    result = run_experiment(config, jobs=args.jobs)
    out = Path(args.out) if args.out else output_root(args) / "experiment" / _label(config)
    _write_experiment(out, result)
    if result.report is not None:
        for m in METRICS:
            print(f"{m}\t{result.report.mean[m]:.4f}\t{result.report.std[m]:.4f}")
    print(out)
    if result.failures:
        logger.error("failed seeds: %s", sorted(result.failures))
        return EXIT_PARTIAL
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("--values needs at least one value")
    try:
        return [float(v) for v in items]
    except ValueError as exc:
        raise ConfigError(f"bad sweep value: {exc}") from exc


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {args.param!r}; choose from {', '.join(SWEEPABLE)}")
    values = _parse_values(args.values)
    config = resolve_config(args)
    outcomes = run_sweep(config, args.param, values, jobs=args.jobs)
    out = Path(args.out) if args.out else output_root(args) / "sweep" / f"{config.dataset_label}_{args.param}"
    rows, partial = [], False
    for value, result in outcomes:
        partial |= bool(result.failures)
        _write_experiment(out / f"{args.param}={value:g}", result)
        if result.report is None:
            continue
        for m in METRICS:
            rows.append([args.param, value, m, result.report.mean[m], result.report.std[m],
                         result.report.n_seeds])
    write_tsv(out / "sweep.tsv", ["parameter", "value", "metric", "mean", "std", "n_seeds"], rows)
    write_json(out / "manifest.json", {"command": "sweep", "version": __version__,
                                       "parameter": args.param, "values": values,
                                       "config": config.flat()})
    print(out)
    return EXIT_PARTIAL if partial else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser, dataset: bool = True) -> None:
    g = p.add_argument_group("configuration (overrides --config and per-dataset defaults)")
    if dataset:
        g.add_argument("--dataset", choices=("simu", "ihdp", "news"))
    for name, typ in CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--config", help="JSON file of flat configuration keys")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drvae", description=__doc__.split("\n")[0])
    parser.add_argument("--output-root", help=f"output root (env {OUTPUT_ROOT_ENV}, default ./runs)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a benchmark dataset file")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="dataset file path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on a dataset file")
    p.add_argument("--data", required=True)
    _add_config_flags(p, dataset=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset's test split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score the noiseless truth (all metrics 0)")
    p.add_argument("--l", type=int, default=None, help="posterior draws per unit (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    for name, func, help_ in (("experiment", cmd_experiment, "multi-seed generate/train/evaluate"),
                              ("sweep", cmd_sweep, "one experiment per parameter value")):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel")
        p.add_argument("--out", help="output directory")
        if name == "sweep":
            p.add_argument("--param", required=True, help=", ".join(SWEEPABLE))
            p.add_argument("--values", required=True, help="comma-separated values")
        p.set_defaults(func=func)
    return parser


def exit_code_for(exc: DrvaeError) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (IngestionError, DimensionError)):
        return EXIT_INGEST
    if isinstance(exc, (ConfigError, ContractError, DomainError)):
        return EXIT_USAGE
    return EXIT_USAGE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DrvaeError as exc:
        print(f"drvae {args.command}: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
