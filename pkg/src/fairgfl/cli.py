"""Experiment runner: config parsing, suites, and result persistence."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

from .federation import ALGORITHMS, FedConfig, RoundError, run_experiment
from .graph import PartitionSpec, ValidationError, generate_sbm, load_graph
from .ldp import LdpParams
from .metrics import write_round_records
from .overlap import ESTIMATOR_MODES

SUITES = ("single", "compare", "motivation", "privacy-sweep", "overlap-sweep")

MOTIVATION_COEFFS = (0.0, 0.05, 0.10, 0.15, 0.20)
PRIVACY_EPSILONS = (1.0, 4.0, 50.0)


class ConfigError(ValueError):
    """Raised for unknown config keys or type mismatches."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


# key -> (type, default). Flat key=value file; short aliases below.
CONFIG_SCHEMA = {
    # federation
    "num_clients": (int, 10),
    "clients_per_round": (int, 5),
    "local_iters": (int, 2),
    "rounds": (int, 100),
    "lr": (float, 0.05),
    "batch_size": (int, 20),
    "lam": (float, 0.1),
    "alpha": (float, 0.8),
    "beta": (float, 0.5),
    "algorithm": (str, "fairgfl"),
    "q": (float, 1.0),
    "seed": (int, 0),
    "hidden_dim": (int, 16),
    "encoder_dim": (int, 16),
    "encoder_epochs": (int, 30),
    "test_fraction": (float, 0.2),
    "public_fraction": (float, 0.05),
    "tau_percentile": (float, 95.0),
    "estimator_mode": (str, "corrected"),
    "use_ldp": (_bool, True),
    "estimate_overlap": (_bool, True),
    "permanent_cache": (_bool, True),
    "literal_eq17": (_bool, False),
    "renormalize": (_bool, False),
    # partition
    "overlap_coefficient": (float, 0.1),
    "overlap_pool_fraction": (float, 0.3),
    "dirichlet_alpha_nonoverlap": (float, 0.5),
    "dirichlet_alpha_overlap": (float, 0.8),
    "partition_seed": (int, 0),
    "literal_volume_scale": (_bool, False),
    # privacy
    "epsilon_a": (float, 3.0),
    "epsilon_b": (float, 1.0),
    "quantiles": (int, 8),
    # dataset
    "dataset": (str, "sbm"),
    "sbm_blocks": (int, 7),
    "sbm_block_size": (int, 60),
    "sbm_p_in": (float, 0.2),
    "sbm_p_out": (float, 0.02),
    "feature_dim": (int, 32),
    "sbm_seed": (int, 7),
    "node_file": (str, ""),
    "edge_file": (str, ""),
}

_ALIASES = {
    "P": "num_clients",
    "K": "clients_per_round",
    "E": "local_iters",
    "J": "rounds",
    "b": "batch_size",
    "lambda": "lam",
    "N": "overlap_coefficient",
    "r": "overlap_pool_fraction",
    "p": "quantiles",
    "d1": "encoder_dim",
}

_FED_KEYS = (
    "num_clients", "clients_per_round", "local_iters", "rounds", "lr",
    "batch_size", "lam", "alpha", "beta", "algorithm", "q", "seed",
    "hidden_dim", "encoder_dim", "encoder_epochs", "test_fraction",
    "public_fraction", "tau_percentile", "estimator_mode", "use_ldp",
    "estimate_overlap", "permanent_cache", "literal_eq17", "renormalize",
)


def parse_config(path=None, overrides: dict | None = None):
    """Resolve a flat key=value config file into the typed config objects.

    Returns (PartitionSpec, FedConfig, LdpParams, extras) where extras
    holds dataset selection keys. Unknown keys and malformed values raise
    ConfigError.
    """
    values = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}

    def assign(key, raw):
        key = _ALIASES.get(key, key)
        if key not in CONFIG_SCHEMA:
            valid = ", ".join(sorted(list(CONFIG_SCHEMA) + list(_ALIASES)))
            raise ConfigError(f"unknown config key {key!r}; valid keys: {valid}")
        typ = CONFIG_SCHEMA[key][0]
        if isinstance(raw, str):
            try:
                values[key] = typ(raw)
            except ValueError:
                name = {_bool: "bool", int: "int", float: "float", str: "str"}[typ]
                raise ConfigError(f"config key {key!r} expects {name}, got {raw!r}") from None
        else:
            values[key] = raw

    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = (part.strip() for part in line.split("=", 1))
                assign(key, raw)
    for key, raw in (overrides or {}).items():
        assign(key, raw)

    fed = FedConfig(**{k: values[k] for k in _FED_KEYS})
    part = PartitionSpec(
        num_clients=values["num_clients"],
        overlap_coefficient=values["overlap_coefficient"],
        overlap_pool_fraction=values["overlap_pool_fraction"],
        dirichlet_alpha_nonoverlap=values["dirichlet_alpha_nonoverlap"],
        dirichlet_alpha_overlap=values["dirichlet_alpha_overlap"],
        seed=values["partition_seed"],
        literal_volume_scale=values["literal_volume_scale"],
    )
    ldp = LdpParams(
        epsilon_a=values["epsilon_a"],
        epsilon_b=values["epsilon_b"],
        quantiles=values["quantiles"],
    )
    extras = {
        k: values[k]
        for k in ("dataset", "sbm_blocks", "sbm_block_size", "sbm_p_in",
                  "sbm_p_out", "feature_dim", "sbm_seed", "node_file", "edge_file")
    }
    return part, fed, ldp, extras


def build_graph(extras: dict):
    if extras["dataset"] == "sbm":
        return generate_sbm(
            extras["sbm_blocks"],
            extras["sbm_block_size"],
            extras["sbm_p_in"],
            extras["sbm_p_out"],
            extras["feature_dim"],
            extras["sbm_seed"],
        )
    if extras["dataset"] == "file":
        if not extras["node_file"] or not extras["edge_file"]:
            raise ConfigError("dataset=file requires node_file and edge_file")
        return load_graph(extras["node_file"], extras["edge_file"])
    raise ConfigError(f"unknown dataset {extras['dataset']!r}; use sbm or file")


def write_manifest(path, part, fed, ldp, extras, suite):
    lines = [f"suite={suite}"]
    for obj, skip in ((fed, ()), (ldp, ()), (extras, ())):
        items = obj.items() if isinstance(obj, dict) else vars(obj).items()
        lines.extend(f"{k}={v}" for k, v in items if k not in skip)
    lines.append(f"overlap_coefficient={part.overlap_coefficient}")
    lines.append(f"overlap_pool_fraction={part.overlap_pool_fraction}")
    lines.append(f"dirichlet_alpha_nonoverlap={part.dirichlet_alpha_nonoverlap}")
    lines.append(f"dirichlet_alpha_overlap={part.dirichlet_alpha_overlap}")
    lines.append(f"partition_seed={part.seed}")
    lines.append(f"literal_volume_scale={part.literal_volume_scale}")
    if part.overlap_multipliers is not None:
        lines.append(
            "overlap_multipliers=" + ",".join(str(m) for m in part.overlap_multipliers)
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _write_overlap_history(out_dir: Path, history):
    if not history:
        return
    est_dir = out_dir / "overlap_estimates"
    est_dir.mkdir(exist_ok=True)
    p = history[0]["O"].shape[0]
    header = ["round"] + [f"o_{i}_{k}" for i in range(p) for k in range(p)]
    for name in ("N_round", "T_round", "N_acc", "T_acc", "O"):
        with open(est_dir / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for j, snap in enumerate(history, start=1):
                writer.writerow([j] + [repr(v) for v in snap[name].ravel()])


def _run_one(graph, part, fed, ldp, out_dir: Path, tag: str):
    result = run_experiment(graph, part, fed, ldp, record_overlap=True)
    name = f"rounds_{tag}.csv" if tag else "rounds.csv"
    write_round_records(out_dir / name, result.records)
    _write_overlap_history(out_dir, result.overlap_history)
    return result


def _thirds_multipliers(p: int) -> tuple[float, ...]:
    """No/low/high overlap groups: multipliers 0, 1, 2 in near-equal thirds."""
    base = p // 3
    sizes = [base + (1 if i < p % 3 else 0) for i in range(3)]
    return (0.0,) * sizes[0] + (1.0,) * sizes[1] + (2.0,) * sizes[2]


def run_suite(suite, part, fed, ldp, extras, out_dir) -> int:
    """Execute one experiment suite; returns a process exit status."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = build_graph(extras)
    try:
        if suite == "single":
            _run_one(graph, part, fed, ldp, out_dir, "")
        elif suite == "compare":
            for alg in ALGORITHMS:
                _run_one(
                    graph, part, dataclasses.replace(fed, algorithm=alg),
                    ldp, out_dir, alg,
                )
        elif suite == "motivation":
            multipliers = _thirds_multipliers(part.num_clients)
            summary = []
            for coeff in MOTIVATION_COEFFS:
                p_i = dataclasses.replace(
                    part, overlap_coefficient=coeff, overlap_multipliers=multipliers
                )
                f_i = dataclasses.replace(fed, algorithm="fedavg")
                result = _run_one(graph, p_i, f_i, ldp, out_dir, f"N{coeff:g}")
                last = result.records[-1]
                summary.append((coeff, last.loss_variance, last.loss_entropy))
            with open(out_dir / "motivation.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["overlap_coefficient", "loss_var", "loss_entropy"])
                for row in summary:
                    writer.writerow([row[0]] + [repr(v) for v in row[1:]])
        elif suite == "privacy-sweep":
            for eps in PRIVACY_EPSILONS:
                l_i = dataclasses.replace(ldp, epsilon_a=eps)
                _run_one(graph, part, fed, l_i, out_dir, f"eps{eps:g}")
            _run_one(
                graph, part, dataclasses.replace(fed, use_ldp=False),
                ldp, out_dir, "noldp",
            )
        elif suite == "overlap-sweep":
            for coeff in MOTIVATION_COEFFS:
                p_i = dataclasses.replace(part, overlap_coefficient=coeff)
                _run_one(graph, p_i, fed, ldp, out_dir, f"N{coeff:g}")
        else:
            raise ConfigError(f"unknown suite {suite!r}; use one of {SUITES}")
    except RoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_manifest(out_dir / "manifest.txt", part, fed, ldp, extras, suite)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment suite")
    run.add_argument("--config", help="flat key=value config file")
    run.add_argument("--suite", default="single", choices=SUITES)
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--algorithm", choices=ALGORITHMS)
    run.add_argument("--no-ldp", action="store_true",
                     help="upload encoded but unperturbed batches")
    run.add_argument("--literal-eq17", action="store_true")
    run.add_argument("--renormalize", action="store_true")
    run.add_argument("--estimator", choices=ESTIMATOR_MODES)
    run.add_argument("--epsilon-a", type=float)
    run.add_argument("--epsilon-b", type=float)
    run.add_argument("--quantiles", type=int)
    run.add_argument("--encoder-dim", type=int)
    run.add_argument("--permanent-cache", choices=("on", "off"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.algorithm:
        overrides["algorithm"] = args.algorithm
    if args.no_ldp:
        overrides["use_ldp"] = False
    if args.literal_eq17:
        overrides["literal_eq17"] = True
    if args.renormalize:
        overrides["renormalize"] = True
    if args.estimator:
        overrides["estimator_mode"] = args.estimator
    if args.epsilon_a is not None:
        overrides["epsilon_a"] = args.epsilon_a
    if args.epsilon_b is not None:
        overrides["epsilon_b"] = args.epsilon_b
    if args.quantiles is not None:
        overrides["quantiles"] = args.quantiles
    if args.encoder_dim is not None:
        overrides["encoder_dim"] = args.encoder_dim
    if args.permanent_cache:
        overrides["permanent_cache"] = args.permanent_cache == "on"

    try:
        part, fed, ldp, extras = parse_config(args.config, overrides)
        return run_suite(args.suite, part, fed, ldp, extras, args.out)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
