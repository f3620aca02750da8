"""Command line entry point: ``synth``, ``train``, ``eval`` and ``importance``.

Every subcommand writes into ``<out>/<run-id>/``. The output root comes from
``--out``, else ``$INVDYG_OUT``, else ``./runs``. A JSON file given with
``--config`` supplies defaults; explicit flags win over it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import DEFAULT_ORDER, DEFAULT_WINDOW, ablation_config, one_step_forecasts
from .datamodel import FeatureSchema, load_cohort, split_temporal, write_cohort
from .errors import ConfigError, exit_code_for
from .evalkit import (
    aggregate_seeds,
    feature_importance,
    make_report,
    save_reports,
    target_groups,
    write_comparison_csv,
    write_importance_csv,
    write_per_time_csv,
    write_showcase_csv,
)
from .model import DisentangledDynamicGraphNet, ModelConfig, build_index, parameters_from_json, parameters_to_json
from .preprocess import DEFAULT_K, StandardScaler, build_dynamic_graph
from .synthgen import GeneratorConfig, generate_cohort
from .training import TrainConfig, sweep_lambda, train

OUT_ENV = "INVDYG_OUT"
METHODS = ("full", "erm", "entangled")
BASELINES = ("ma", "ar")
ENV_SCHEDULE = (("env_a", 2.0), ("env_b", -1.0), ("env_test", -2.0))

SYNTH_DEFAULTS = {
    "patients": 60,
    "days": 12,
    "envs": 3,
    "seed": 0,
    "noise_sigma": GeneratorConfig.noise_sigma,
    "variant_noise": GeneratorConfig.variant_noise,
    "neighbor_strength": GeneratorConfig.neighbor_strength,
    "variant_lead": GeneratorConfig.variant_lead,
}

TRAIN_DEFAULTS = {
    "cohort": None,
    "schema": None,
    "split": "by-env",
    "fractions": [0.6, 0.2, 0.2],
    "test_envs": ["env_test"],
    "split_seed": 0,
    "k": DEFAULT_K,
    "lambda": [1.0],
    "seeds": [0],
    "methods": list(METHODS),
    "epochs": 1000,
    "patience": 50,
    "lr": 1e-2,
    "weight_decay": 5e-7,
    "samples": 3,
    "intervention": "global",
    "hidden": 8,
    "layers": 2,
    "heads": 2,
    "window": None,
    "te_mode": "fixed-ladder",
    "ma_window": DEFAULT_WINDOW,
    "ar_order": DEFAULT_ORDER,
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _names(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--run-id", help="run directory name under the output root")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invdyg", description="Invariant dynamic-graph forecasting experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort with a planted shift")
    _common(p)
    p.add_argument("--patients", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--envs", type=int, help="number of environments (>= 2)")
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--variant-noise", dest="variant_noise", type=float)
    p.add_argument("--neighbor-strength", dest="neighbor_strength", type=float)
    p.add_argument("--variant-lead", dest="variant_lead", type=int)

    p = sub.add_parser("train", help="split, scale, build graphs and train one model per method and seed")
    _common(p)
    p.add_argument("--cohort", help="cohort CSV")
    p.add_argument("--schema", help="schema JSON (default: the built-in ICU layout)")
    p.add_argument("--split", choices=["by-time", "by-patient", "by-env"])
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--test-envs", dest="test_envs", type=_names)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--k", type=int, help=f"KNN out-degree (default {DEFAULT_K})")
    p.add_argument("--lambda", dest="lambda", type=_floats, help="one value, or a list to select on validation")
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--methods", type=_names, help="subset of full,erm,entangled")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--samples", type=int, help="sampled variant patterns per step")
    p.add_argument("--intervention", choices=["global", "per-node"])
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--window", type=int, help="history window in days (default: all)")
    p.add_argument("--te-mode", dest="te_mode", choices=["fixed-ladder", "learnable"])

    p = sub.add_parser("eval", help="score trained models and statistical baselines on the test split")
    _common(p)
    p.add_argument("--group-by", dest="group_by", help="'env' or a categorical feature name")
    p.add_argument("--baselines", type=_names, help="subset of ma,ar (default both)")
    p.add_argument("--showcase", type=_names, help="patients whose test predictions are exported")

    p = sub.add_parser("importance", help="gradient saliency of every feature per day")
    _common(p)
    p.add_argument("--method", default="full")
    p.add_argument("--seed", type=int, help="checkpoint seed (default: first trained seed)")
    p.add_argument("--patient", help="restrict the mean to one patient")
    p.add_argument("--part", choices=["train", "val", "test"], default="test")
    return parser


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    cfg = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _run_dir(args, default_id: str) -> Path:
    run = _out_root(args) / (args.run_id or default_id)
    run.mkdir(parents=True, exist_ok=True)
    return run


def _existing_run(args) -> Path:
    if not args.run_id:
        raise ConfigError("--run-id is required")
    run = _out_root(args) / args.run_id
    if not (run / "config.resolved.json").exists():
        raise ConfigError(f"no trained run at {run} (missing {run / 'config.resolved.json'})")
    return run


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def environments(n: int) -> tuple[tuple[str, float], ...]:
    if n < 2:
        raise ConfigError("a distribution shift needs at least 2 environments")
    extra = tuple((f"env_{i}", 1.0 if i % 2 else -1.0) for i in range(len(ENV_SCHEDULE), n))
    return (ENV_SCHEDULE + extra)[:n]


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    gen = GeneratorConfig(
        n_patients=cfg["patients"],
        n_days=cfg["days"],
        environments=environments(cfg["envs"]),
        noise_sigma=cfg["noise_sigma"],
        variant_noise=cfg["variant_noise"],
        neighbor_strength=cfg["neighbor_strength"],
        variant_lead=cfg["variant_lead"],
        seed=cfg["seed"],
    )
    table, annotation = generate_cohort(gen)
    run = _run_dir(args, f"synth-seed{cfg['seed']}")
    write_cohort(table, run / "cohort.csv")
    annotation.save(run / "annotation.json")
    _write_json(run / "config.resolved.json", {"command": "synth", "version": __version__, **cfg})
    print(f"wrote {len(table)} rows ({gen.n_patients} patients x {gen.n_days} days, {len(gen.environments)} envs) to {run / 'cohort.csv'}")
    return 0


def _schema(cfg: dict) -> FeatureSchema:
    if cfg["schema"] is None:
        return FeatureSchema.anic_like()
    path = Path(cfg["schema"])
    if not path.exists():
        raise ConfigError(f"schema file not found: {path}")
    return FeatureSchema.load(path)


def _graphs(cfg: dict):
    if not cfg["cohort"]:
        raise ConfigError("--cohort is required")
    path = Path(cfg["cohort"])
    if not path.exists():
        raise ConfigError(f"cohort file not found: {path}")
    table = load_cohort(path, _schema(cfg))
    test_envs = cfg["test_envs"] if cfg["split"] == "by-env" else None
    split = split_temporal(table, cfg["split"], cfg["fractions"], seed=cfg["split_seed"], test_envs=test_envs)
    return build_dynamic_graph(split, cfg["k"])


def _model_config(cfg: dict, seed: int) -> ModelConfig:
    return ModelConfig(
        hidden_dim=cfg["hidden"],
        n_layers=cfg["layers"],
        n_heads=cfg["heads"],
        history_window=cfg["window"],
        te_mode=cfg["te_mode"],
        seed=seed,
    )


def _train_config(cfg: dict, seed: int, lam: float) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        max_epochs=cfg["epochs"],
        patience=cfg["patience"],
        n_variant_samples=cfg["samples"],
        intervention=cfg["intervention"],
        lam=lam,
        seed=seed,
    )


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    unknown = set(cfg["methods"]) - set(METHODS)
    if unknown or not cfg["methods"]:
        raise ConfigError(f"methods must be a non-empty subset of {METHODS}, got {cfg['methods']}")
    if not cfg["seeds"]:
        raise ConfigError("seed list must be non-empty")
    if not cfg["lambda"]:
        raise ConfigError("need at least one lambda value")
    if cfg["cohort"]:
        cfg["cohort"] = str(Path(cfg["cohort"]).resolve())
    if cfg["schema"]:
        cfg["schema"] = str(Path(cfg["schema"]).resolve())
    train_graph, val_graph, _ = _graphs(cfg)
    run = _run_dir(args, "train")
    _write_json(run / "config.resolved.json", {"command": "train", "version": __version__, **cfg})
    lambdas = [float(v) for v in cfg["lambda"]]
    for method in cfg["methods"]:
        for seed in cfg["seeds"]:
            mcfg, tcfg = _model_config(cfg, seed), _train_config(cfg, seed, lambdas[0])
            if method != "full":
                mcfg, tcfg = ablation_config(method, mcfg, tcfg)
            out = run / method / f"seed{seed}"
            out.mkdir(parents=True, exist_ok=True)
            sweep = None
            if method == "full" and len(lambdas) > 1:
                result = sweep_lambda(train_graph, val_graph, mcfg, tcfg, lambdas)
                model, history = result.model, result.history
                sweep = result.val_mae_by_lambda
            else:
                model, history = train(train_graph, val_graph, mcfg, tcfg)
            history.save(out / "history.jsonl")
            checkpoint = {
                "version": __version__,
                "method": method,
                "seed": seed,
                "lambda": history.lam,
                "lambda_sweep": None if sweep is None else {str(k): v for k, v in sweep.items()},
                "best_epoch": history.best_epoch,
                "stop_reason": history.stop_reason,
                "best_val_mae": history.best_val_mae,
                "model_config": mcfg.to_dict(),
                "train_config": TrainConfig(**{**tcfg.to_dict(), "lam": history.lam}).to_dict(),
                "schema": train_graph.schema.to_dict(),
                "scaler": train_graph.scaler.to_dict(),
                "parameters": parameters_to_json(model),
            }
            _write_json(out / "checkpoint.json", checkpoint)
            print(
                f"{method} seed {seed}: lambda {history.lam:g}, best epoch {history.best_epoch}, "
                f"val MAE {history.best_val_mae:.4f} ({history.stop_reason})"
            )
    return 0


def load_checkpoint(path: Path) -> tuple[DisentangledDynamicGraphNet, dict]:
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    schema = FeatureSchema.from_dict(payload["schema"])
    model = DisentangledDynamicGraphNet(schema, ModelConfig.from_dict(payload["model_config"]))
    parameters_from_json(model, payload["parameters"])
    model.eval()
    return model, payload


def _run_config(run: Path) -> dict:
    return json.loads((run / "config.resolved.json").read_text(encoding="utf-8"))


def _check_scaler(graph, payload: dict) -> None:
    saved = StandardScaler.from_dict(payload["scaler"])
    if not (np.array_equal(saved.mean, graph.scaler.mean) and np.array_equal(saved.std, graph.scaler.std)):
        raise ConfigError("cohort changed since training: scaler statistics differ from the checkpoint")


def cmd_eval(args) -> int:
    run = _existing_run(args)
    cfg = _run_config(run)
    _, _, test_graph = _graphs(cfg)
    index = build_index(test_graph)
    if len(index.y) == 0:
        raise ConfigError("the test split has no scored days")
    group_by = args.group_by or ("env" if all(e is not None for e in index.target_env) else "Disease")
    groups = target_groups(test_graph, index, group_by)
    days = index.target_time

    reports, per_seed = [], []
    for method in cfg["methods"]:
        seed_reports = []
        for seed in cfg["seeds"]:
            model, payload = load_checkpoint(run / method / f"seed{seed}" / "checkpoint.json")
            _check_scaler(test_graph, payload)
            pred = index.unscale(model.predict(build_index(test_graph, model.config.history_window)))
            rep = make_report(method, pred, index.y_raw, days, groups, seed=seed)
            seed_reports.append(rep)
            for pid in args.showcase or []:
                sel = np.array([n == pid for n in index.target_node])
                if not sel.any():
                    raise ConfigError(f"patient {pid!r} has no scored test days")
                write_showcase_csv(days[sel], index.y_raw[sel], pred[sel], run / method / f"seed{seed}" / f"showcase_{pid}.csv")
        per_seed += seed_reports
        agg = aggregate_seeds(seed_reports)
        write_per_time_csv(agg.per_time, run / method / "per_time_mae.csv")
        reports.append(agg)
    for name in args.baselines if args.baselines is not None else BASELINES:
        if name not in BASELINES:
            raise ConfigError(f"unknown baseline {name!r}; expected one of {BASELINES}")
        pred, label = one_step_forecasts(test_graph, name, w=cfg["ma_window"], p=cfg["ar_order"])
        reports.append(make_report(name.upper(), pred, label, days, groups))

    save_reports(reports, run / "metrics.json")
    save_reports(per_seed, run / "metrics_per_seed.json")
    write_per_time_csv(reports[0].per_time, run / "per_time_mae.csv")
    write_comparison_csv(reports, run / "comparison.csv")
    for r in reports:
        std = "" if r.mae_std is None else f" ± {r.mae_std:.4f}"
        print(f"{r.method:>10}: RMSE {r.rmse:.4f}  MAE {r.mae:.4f}{std}")
    print(f"wrote {run / 'comparison.csv'}")
    return 0


def cmd_importance(args) -> int:
    run = _existing_run(args)
    cfg = _run_config(run)
    if args.method not in cfg["methods"]:
        raise ConfigError(f"method {args.method!r} was not trained in {run}")
    seed = cfg["seeds"][0] if args.seed is None else args.seed
    model, payload = load_checkpoint(run / args.method / f"seed{seed}" / "checkpoint.json")
    graphs = dict(zip(("train", "val", "test"), _graphs(cfg)))
    graph = graphs[args.part]
    _check_scaler(graph, payload)
    if args.patient is not None and args.patient not in graph.node_ids():
        raise ConfigError(f"patient {args.patient!r} is not in the {args.part} split")
    table = feature_importance(model, graph, patient=args.patient)
    write_importance_csv(table, run / "importance.csv")
    top = ", ".join(table.ranking()[:3])
    print(f"wrote {len(table.features) * len(table.days)} rows to {run / 'importance.csv'}; top features: {top}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "importance": cmd_importance}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
