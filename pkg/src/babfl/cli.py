"""Command-line driver: ``babfl partition | run | evaluate | oracle``.

Exit status is 0 on success, 1 for configuration or validation errors and 2 for
failures while running.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bnn, federation, oracles, seeding
from .barycenter import AggregationMethod
from .data import PartitionPlan, dirichlet_partition, load_idx, synth_blobs, train_test_split
from .metrics import reliability_bins, report_from_probs

log = logging.getLogger("babfl")

OUTPUT_ENV = "BABFL_OUTPUT_DIR"
CSV_COLUMNS = ["round", "method", "n_bayes_layers", "accuracy", "nll", "ece", "wall_seconds", "seed", "config_hash"]
# keys that never change results and so stay out of the config hash
UNHASHED = ("output_dir", "threads", "record_timing")

DEFAULTS = {
    "seed": 0,
    "output_dir": "results",
    "threads": 1,
    "record_timing": False,
    "dataset": {
        "kind": "blobs",
        "n_classes": 3,
        "n_per_class": 300,
        "dim": 2,
        "spread": 2.0,
        "n_test": 300,
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
    },
    "partition": {"n_clients": 10, "alpha": 0.5, "plan_file": None},
    "model": {"hidden": [32, 32], "n_bayesian_layers": 1, "sigma_init": bnn.DEFAULT_SIGMA_INIT},
    "federation": {"method": "RKLB", "rounds": 20, "fraction": 1.0, "checkpoint_every": 0},
    "train": {
        "epochs": 5,
        "learning_rate": 0.1,
        "batch_size": 32,
        "kl_scale": None,
        "mc_samples_train": 1,
        "freeze_variance": False,
    },
    "eval": {"samples": 16, "n_bins": 15},
}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value


def resolve_config(path=None, overrides=(), env=None) -> dict:
    """Defaults, then the YAML/JSON file, then ``OUTPUT_ENV``, then ``key=value`` overrides."""
    env = os.environ if env is None else env
    file_cfg = {}
    if path is not None:
        try:
            file_cfg = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a mapping")
    cfg = _merge(DEFAULTS, file_cfg)
    if env.get(OUTPUT_ENV):
        cfg["output_dir"] = env[OUTPUT_ENV]
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        methods = [AggregationMethod.parse(m) for m in _methods(cfg)]
    except ValueError as e:
        raise ConfigError(str(e)) from e
    n_bayes = int(cfg["model"]["n_bayesian_layers"])
    n_layers = len(cfg["model"]["hidden"]) + 1
    if not 0 <= n_bayes <= n_layers:
        raise ConfigError(f"model.n_bayesian_layers must lie in [0, {n_layers}]")
    for m in methods:
        if m is AggregationMethod.FEDAVG and n_bayes > 0:
            raise ConfigError("FEDAVG requires n_bayesian_layers = 0")
    ds = cfg["dataset"]
    if ds["kind"] not in ("blobs", "idx"):
        raise ConfigError("dataset.kind must be 'blobs' or 'idx'")
    if ds["kind"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not ds[key] or not Path(ds[key]).exists():
                raise ConfigError(f"dataset.{key} does not exist: {ds[key]!r}")
    plan_file = cfg["partition"]["plan_file"]
    if plan_file and not Path(plan_file).exists():
        raise ConfigError(f"partition.plan_file does not exist: {plan_file!r}")
    if int(cfg["seed"]) < 0:
        raise ConfigError("seed must be nonnegative")
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be positive")
    try:
        train_config(cfg)
        federation.FederationConfig(rounds=int(cfg["federation"]["rounds"]), method=methods[0],
                                    fraction=float(cfg["federation"]["fraction"]))
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _methods(cfg) -> list[str]:
    m = cfg["federation"]["method"]
    return [s.strip() for s in m.split(",")] if isinstance(m, str) else list(m)


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in UNHASHED}
    return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def train_config(cfg: dict) -> bnn.TrainConfig:
    t = cfg["train"]
    return bnn.TrainConfig(
        epochs=int(t["epochs"]),
        learning_rate=float(t["learning_rate"]),
        batch_size=int(t["batch_size"]),
        kl_scale=None if t["kl_scale"] is None else float(t["kl_scale"]),
        mc_samples_train=int(t["mc_samples_train"]),
        freeze_variance=bool(t["freeze_variance"]),
    )


# -- experiment assembly ---------------------------------------------------------------------


def load_datasets(cfg: dict):
    ds, seed = cfg["dataset"], int(cfg["seed"])
    if ds["kind"] == "idx":
        train = load_idx(ds["train_images"], ds["train_labels"])
        test = load_idx(ds["test_images"], ds["test_labels"], n_classes=train.n_classes)
        return train, test
    full = synth_blobs(int(ds["n_classes"]), int(ds["n_per_class"]), int(ds["dim"]), float(ds["spread"]),
                       seeding.stream(seed, "data"))
    return train_test_split(full, int(ds["n_test"]), seeding.stream(seed, "split"))


def make_plan(cfg: dict, train) -> PartitionPlan:
    p = cfg["partition"]
    if p["plan_file"]:
        plan = PartitionPlan.load(p["plan_file"])
        plan.validate(len(train))
        return plan
    plan = dirichlet_partition(train.labels, int(p["n_clients"]), float(p["alpha"]),
                               seeding.stream(int(cfg["seed"]), "partition"))
    plan.seed = int(cfg["seed"])
    return plan


def initial_net(cfg: dict, train) -> bnn.HybridNet:
    m = cfg["model"]
    return bnn.HybridNet.build(train.dim, [int(h) for h in m["hidden"]], train.n_classes,
                               int(m["n_bayesian_layers"]), seeding.rng(int(cfg["seed"]), "init"),
                               float(m["sigma_init"]))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def run_name(method: str, cfg: dict) -> str:
    return f"{method}_nbl{int(cfg['model']['n_bayesian_layers'])}_seed{int(cfg['seed'])}"


# -- subcommands -----------------------------------------------------------------------------


def cmd_partition(cfg: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, _ = load_datasets(cfg)
    plan = make_plan(cfg, train)
    h = config_hash(cfg)
    plan_path = out / "partition.json"
    plan_path.write_text(plan.to_json(), encoding="utf-8")
    table = plan.class_table(train.labels, train.n_classes)
    rows = [[k, *row.tolist(), int(row.sum()), h] for k, row in enumerate(table)]
    columns = ["client", *[f"class_{c}" for c in range(train.n_classes)], "total", "config_hash"]
    (out / "partition_summary.csv").write_text(_csv_text(rows, columns), encoding="utf-8")
    print(_csv_text(rows, columns), end="")
    return plan_path


def cmd_run(cfg: dict) -> list[Path]:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    plan = make_plan(cfg, train)
    h = config_hash(cfg)
    n_bayes = int(cfg["model"]["n_bayesian_layers"])
    seed = int(cfg["seed"])
    written = []
    for method in _methods(cfg):
        method = AggregationMethod.parse(method).value
        name = run_name(method, cfg)
        clients = federation.build_clients(train, plan)
        net0 = initial_net(cfg, train)
        ckpt_every = int(cfg["federation"]["checkpoint_every"])
        ckpt_dir = out / "checkpoints" / name
        if ckpt_every:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
        fed_cfg = federation.FederationConfig(
            rounds=int(cfg["federation"]["rounds"]),
            method=method,
            fraction=float(cfg["federation"]["fraction"]),
            train=train_config(cfg),
            eval_samples=int(cfg["eval"]["samples"]),
            n_bins=int(cfg["eval"]["n_bins"]),
            seed=seed,
            threads=int(cfg["threads"]),
            checkpoint_every=ckpt_every,
            checkpoint_dir=str(ckpt_dir) if ckpt_every else None,
        )
        records, server = federation.run(
            fed_cfg, net0, clients, test,
            on_round=lambda s, r: log.info("%s round %d acc=%.4f nll=%.4f ece=%.4f", method, r.round_index, r.accuracy, r.nll, r.ece),
        )
        timing = bool(cfg["record_timing"])
        rows = [
            [r.round_index, method, n_bayes, r.accuracy, r.nll, r.ece, r.wall_seconds if timing else None, seed, h]
            for r in records
        ]
        csv_path = out / f"{name}.csv"
        csv_path.write_text(_csv_text(rows, CSV_COLUMNS), encoding="utf-8")
        (out / f"{name}.timing.csv").write_text(
            _csv_text([[r.round_index, r.wall_seconds] for r in records], ["round", "wall_seconds"]), encoding="utf-8"
        )
        final_metadata = {"config": cfg, "config_hash": h, "method": method, "round": server.round_index}
        bnn.save_checkpoint(out / f"{name}.final.ckpt", server.net, final_metadata)
        probs = bnn.predictive(server.net, test.features, int(cfg["eval"]["samples"]),
                               seeding.stream(seed, "eval", server.round_index))
        bins = reliability_bins(probs, test.labels, int(cfg["eval"]["n_bins"]))
        (out / f"{name}.reliability.csv").write_text(
            _csv_text([[*b, h] for b in bins], ["bin_lower", "bin_upper", "count", "accuracy", "confidence", "config_hash"]),
            encoding="utf-8",
        )
        manifest = {
            "config": cfg,
            "config_hash": h,
            "method": method,
            "results_csv": csv_path.name,
            "partition": {"sizes": plan.sizes(), "alpha": plan.alpha, "repaired": plan.repaired},
            "n_train": len(train),
            "n_test": len(test),
        }
        (out / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(csv_path)
        print(csv_path)
    return written


def cmd_evaluate(checkpoint, cfg: dict | None, samples=None, n_bins=None, seed=None) -> dict:
    net, metadata = bnn.load_checkpoint(checkpoint)
    if cfg is None:
        if "config" not in metadata:
            raise ConfigError("checkpoint carries no config; pass --config")
        cfg = _merge(DEFAULTS, metadata["config"])
    _, test = load_datasets(cfg)
    samples = int(cfg["eval"]["samples"] if samples is None else samples)
    n_bins = int(cfg["eval"]["n_bins"] if n_bins is None else n_bins)
    seed = int(cfg["seed"] if seed is None else seed)
    probs = bnn.predictive(net, test.features, samples, seeding.stream(seed, "evaluate"))
    report = report_from_probs(probs, test.labels, n_bins, samples).as_dict()
    report["checkpoint"] = str(checkpoint)
    report["config_hash"] = metadata.get("config_hash", config_hash(cfg))
    print(json.dumps(report, indent=2, sort_keys=True))
    return report


def cmd_oracle(suite: str, seed: int = 0) -> bool:
    names = list(oracles.SUITES) if suite == "all" else [suite]
    ok = True
    for name in names:
        results = oracles.SUITES[name](seed=seed)
        for r in results:
            print(r.line())
        failed = [r for r in results if not r.passed]
        worst = max(r.residual / r.tolerance for r in results)
        print(f"{name}: {len(results) - len(failed)}/{len(results)} passed (worst residual/tol = {worst:.3g})")
        for r in failed:
            print(f"  reproduce: babfl oracle {name} --seed {seed}  (case {r.case}, case seed {r.seed})")
        ok &= not failed
    return ok


# -- entry point -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="babfl", description="Barycentric aggregation for Bayesian federated learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_args(p):
        p.add_argument("--config", help="YAML or JSON experiment file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (dotted path)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides config and $%s)" % OUTPUT_ENV)
        p.add_argument("--threads", type=int)

    p = sub.add_parser("partition", help="write a Dirichlet label-skew partition plan")
    experiment_args(p)
    p = sub.add_parser("run", help="run federated training and write per-round results")
    experiment_args(p)
    p.add_argument("--method", help="aggregation method, or a comma list for a sweep")
    p.add_argument("--rounds", type=int)
    p = sub.add_parser("evaluate", help="re-score a saved checkpoint")
    experiment_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--bins", type=int)
    p = sub.add_parser("oracle", help="run a verification suite against brute-force oracles")
    p.add_argument("suite", choices=[*oracles.SUITES, "all"])
    p.add_argument("--seed", type=int, default=0)
    return parser


def _experiment_config(args, require=True):
    overrides = list(args.set)
    for flag, key in (("seed", "seed"), ("out", "output_dir"), ("threads", "threads"),
                      ("method", "federation.method"), ("rounds", "federation.rounds")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if not require and args.config is None and not overrides:
        return None
    return resolve_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "oracle":
            return 0 if cmd_oracle(args.suite, args.seed) else 1
        if args.command == "evaluate":
            if not Path(args.checkpoint).exists():
                raise ConfigError(f"checkpoint does not exist: {args.checkpoint}")
            cmd_evaluate(args.checkpoint, _experiment_config(args, require=False), args.samples, args.bins)
            return 0
        cfg = _experiment_config(args)
        if args.command == "partition":
            cmd_partition(cfg)
        else:
            cmd_run(cfg)
        return 0
    except ConfigError as e:
        print(f"babfl: configuration error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report any runtime failure with context
        print(f"babfl: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
