"""Command-line front end: ``mftcnn <command> [--config FILE] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 2 contract or config violation, 3 nonconvergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attack import AttackConfig, pgd_attack, verify_adversarial
from .benchmark import (BenchmarkConfig, derive_seed, generate_dataset, run_benchmark, train_best)
from .controller import TrainConfig, load, save
from .dynamics import NoiseTensor
from .exceptions import ContractViolation, NonConvergence
from .io import load_dataset, save_dataset, save_tensor
from .lq import lq_problem
from .optimizer import OptimizerConfig
from .retraining import (AugmentedDataset, Provenance, harvest_adversarials, proximity_grouping,
                         retrain, retraining_manifest, solve_from_adversarials)
from .stability import StabilityQuery, estimate_containment, find_delta

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONTRACT, EXIT_NONCONVERGENCE, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("generate", "train", "attack", "stability", "retrain", "benchmark")

logger = logging.getLogger("mftcnn")


# --- config -------------------------------------------------------------------------

def parse_config(text: str, scale: str = "full") -> BenchmarkConfig:
    """Parse a JSON config on top of the ``scale`` preset; unknown keys are errors."""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ContractViolation(f"config is not valid JSON (line {exc.lineno}, column {exc.colno}): "
                                f"{exc.msg}") from exc
    if not isinstance(data, dict):
        raise ContractViolation("config must be a JSON object")
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ContractViolation(f"config field 'version': unsupported schema version {version!r}")
    base = BenchmarkConfig.smoke() if scale == "smoke" else BenchmarkConfig()
    merged = base.to_dict()
    known = set(merged)
    unknown = set(data) - known
    if unknown:
        raise ContractViolation(f"unknown config field(s): {', '.join(sorted(unknown))}")
    if "lq" in data:
        if not isinstance(data["lq"], dict):
            raise ContractViolation("config field 'lq' must be an object")
        merged["lq"] = {**merged["lq"], **data.pop("lq")}
    merged.update(data)
    try:
        return BenchmarkConfig.from_dict(merged)
    except TypeError as exc:
        raise ContractViolation(f"config: {exc}") from exc


def config_digest(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _versions() -> dict:
    out = {}
    for pkg in ("artifact", "numpy", "scipy", "scikit-learn"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


@dataclasses.dataclass
class RunManifest:
    command: str
    config_digest: str
    seeds: dict
    started: str
    outputs: list = dataclasses.field(default_factory=list)
    finished: str = ""
    module_versions: dict = dataclasses.field(default_factory=_versions)
    revision: str = dataclasses.field(default_factory=_revision)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


# --- commands ------------------------------------------------------------------------

def _spec(cfg):
    return lq_problem(cfg.lq, divergence_threshold=cfg.divergence_threshold)


def cmd_generate(cfg: BenchmarkConfig, args, out: Path) -> list:
    batch = generate_dataset(cfg)
    Z, Y = batch.records()
    steps = cfg.lq.steps
    save_dataset(out / "dataset.csv", Z, Y, steps)
    save_dataset(out / "dataset.bin", Z, Y, steps)
    save_tensor(out / "states.bin", batch.states)
    save_tensor(out / "controls.bin", batch.controls)
    (out / "generate.json").write_text(json.dumps(
        {"achieved_cost": batch.achieved_cost, "iterations": batch.iterations_used,
         "converged": batch.converged, "records": len(Z)}, indent=2))
    return ["dataset.csv", "dataset.bin", "states.bin", "controls.bin", "generate.json"]


def cmd_train(cfg, args, out: Path) -> list:
    Z, Y, _ = load_dataset(args.dataset)
    params, losses = train_best(args.arch, Z, Y, cfg)
    save(params, out / f"{args.arch}.txt")
    (out / "train.json").write_text(json.dumps({"arch": args.arch, "restart_losses": losses}, indent=2))
    return [f"{args.arch}.txt", "train.json"]


def _attack_config(cfg, key="attack"):
    return AttackConfig(alpha=cfg.alpha, beta=cfg.beta, max_pgd_iters=cfg.max_pgd_iters,
                        restarts=cfg.attack_restarts, seed=derive_seed(cfg.seed, key),
                        start_radius=min(20.0, cfg.alpha), n_samples=cfg.attack_samples)


def cmd_attack(cfg, args, out: Path) -> list:
    params = load(args.controller)
    spec, grid = _spec(cfg), cfg.lq.grid
    res = pgd_attack(spec, grid, params, _attack_config(cfg))
    doc = res.to_dict()
    doc["verified"] = verify_adversarial(spec, grid, params, res)
    (out / "attack.json").write_text(json.dumps(doc, indent=2))
    (out / "attack_path.csv").write_text(res.path_csv())
    return ["attack.json", "attack_path.csv"]


def cmd_stability(cfg, args, out: Path) -> list:
    params = load(args.controller)
    spec, grid = _spec(cfg), cfg.lq.grid
    query = StabilityQuery(r=200.0, trials=cfg.trials, seed=derive_seed(cfg.seed, "stability"))
    reports, files = [], []
    for sc in cfg.scenarios:
        q = query.replace(r=sc.r, label=sc.label,
                          epsilon=query.epsilon if sc.epsilon is None else sc.epsilon)
        entry = {}
        delta = sc.delta
        if np.isnan(delta):
            search = find_delta(spec, grid, params, sc.r, sc.epsilon, q)
            entry["delta_search"] = search.to_dict()
            delta = search.delta
        rep = estimate_containment(spec, grid, params, delta, q)
        entry.update(rep.to_dict())
        reports.append(entry)
        name = f"trials_{sc.label}.csv"
        (out / name).write_text(rep.trials_csv())
        files.append(name)
    (out / "stability.json").write_text(json.dumps(reports, indent=2))
    return ["stability.json", *files]


def cmd_retrain(cfg, args, out: Path) -> list:
    params = load(args.controller)
    Z, Y, _ = load_dataset(args.dataset)
    spec, grid = _spec(cfg), cfg.lq.grid
    harvest_cfg = dataclasses.replace(_attack_config(cfg, "harvest"), restarts=1)
    parts = [(Z, Y, Provenance.BASE)]
    adv_batch = None
    rounds = max(1, args.rounds)
    for rnd in range(rounds):
        hcfg = dataclasses.replace(harvest_cfg, seed=derive_seed(cfg.seed, "harvest", rnd))
        harvest = harvest_adversarials(spec, grid, params, hcfg, cfg.n_adversarial,
                                       min_separation=cfg.min_separation)
        if len(harvest.states):
            order, g = proximity_grouping(harvest.states, cfg.adversarial_population)
            noise = NoiseTensor.sample(derive_seed(cfg.seed, "adversarial_noise", rnd), len(order), grid, 1)
            adv_batch = solve_from_adversarials(spec, grid, harvest.states[order], noise,
                                                OptimizerConfig(learning_rate=cfg.optimizer_learning_rate), g)
            parts.append((*adv_batch.records(), Provenance.ADVERSARIAL))
        augmented = AugmentedDataset.from_records(*parts)
        tc = TrainConfig(epochs=cfg.retrain_epochs, batch_size=min(cfg.batch_size, len(augmented)),
                         learning_rate=cfg.learning_rate, shuffle_seed=derive_seed(cfg.seed, "retrain", rnd))
        params = retrain(params, augmented, tc, cfg.adversarial_weight).params
    save(params, out / "nn1_improved.txt")
    save_dataset(out / "augmented.csv", augmented.Z, augmented.Y, grid.steps, augmented.provenance)
    (out / "retraining_manifest.json").write_text(
        retraining_manifest(harvest, hcfg, adv_batch, tc, cfg.adversarial_weight))
    return ["nn1_improved.txt", "augmented.csv", "retraining_manifest.json"]


def cmd_benchmark(cfg, args, out: Path) -> list:
    report = run_benchmark(cfg, out)
    print(report.table.to_text(), end="")
    print("all checks pass:", report.summary["all_checks_pass"])
    return sorted(Path(p).name for p in report.paths.values())


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "attack": cmd_attack,
            "stability": cmd_stability, "retrain": cmd_retrain, "benchmark": cmd_benchmark}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (strict schema)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("--scale", choices=("smoke", "full"), default="full", help="preset scale")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mftcnn", description=(
        "Neural feedback controllers for mean-field-type control: data generation, training, "
        "stability analysis, adversarial attacks and retraining."))
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("generate", parents=[common], help="solve the sample-average problem, write the dataset")
    p = sub.add_parser("train", parents=[common], help="train a Table I controller on a dataset")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--arch", choices=("nn1", "nn2"), default="nn1")
    p = sub.add_parser("attack", parents=[common], help="PGD attack on a controller's initial state")
    p.add_argument("--controller", type=Path, required=True)
    p = sub.add_parser("stability", parents=[common], help="containment probabilities per scenario")
    p.add_argument("--controller", type=Path, required=True)
    p = sub.add_parser("retrain", parents=[common], help="harvest adversarials and retrain")
    p.add_argument("--controller", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--rounds", type=int, default=1, help="harvest/retrain rounds")
    sub.add_parser("benchmark", parents=[common], help="full linear-quadratic experiment")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = args.config.read_bytes() if args.config else b""
        cfg = parse_config(raw.decode("utf-8"), args.scale)
        if args.seed is not None:
            if args.seed < 0:
                raise ContractViolation("--seed must be nonnegative")
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.threads is not None and args.threads < 1:
            raise ContractViolation("--threads must be >= 1")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, config_digest(raw), {"master": cfg.seed}, _now())
        with threadpool_limits(limits=args.threads or os.cpu_count()):
            outputs = HANDLERS[args.command](cfg, args, out)
        manifest.outputs = [str(out / name) for name in outputs]
        manifest.finished = _now()
        (out / f"manifest_{args.command}.json").write_text(manifest.to_json())
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except NonConvergence as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
