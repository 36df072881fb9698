"""Command-line harness for the simulator and sampling optimizer.

Subcommands: gen-data, estimate, optimize, simulate, compare, sweep-k.
Every run writes its resolved configuration next to its outputs. The
FEDSAMP_THREADS environment variable caps seed-level parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments
from .config import apply_overrides, load_config, training_from_dict
from .dataset import save_dataset
from .estimation import run_estimation
from .sampling_opt import OptInstance, optimize_sampling, optimizer_report


def _write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


def _prepare(args) -> tuple[dict, Path]:
    k = getattr(args, "k", None)
    if isinstance(k, list):  # sweep-k's repeated flag is the sweep, not an override
        k = None
    config = apply_overrides(
        load_config(args.config),
        seed=args.seed,
        seeds=getattr(args, "seeds", None),
        k=k,
        target_loss=getattr(args, "target_loss", None),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(config, out / "config.resolved.json")
    return config, out


def _seed_list(config: dict) -> list[int]:
    base = int(config["seed"])
    return [base + i for i in range(int(config["seeds"]))]


def cmd_gen_data(args) -> int:
    config, out = _prepare(args)
    data = experiments.build_dataset(config, int(config["seed"]))
    save_dataset(data, out / "dataset.npz")
    print(f"wrote {data.n_clients} shards ({data.total} samples) to {out / 'dataset.npz'}")
    return 0


def cmd_estimate(args) -> int:
    config, out = _prepare(args)
    seed = int(config["seed"])
    fleet, train, test = experiments.build_environment(config, seed)
    tcfg = training_from_dict(config["training"], seed=experiments._child_seed(seed, 4))
    report = run_estimation(
        fleet, train, tcfg, list(config["estimation"]["loss_levels"]), test
    )
    _write_json(report.to_json_dict(), out / "estimation.json")
    print(
        f"bound ratio {report.params.bound_ratio:.6g} "
        f"(pilot time {report.pilot_time_s:.1f}s) -> {out / 'estimation.json'}"
    )
    return 0


def cmd_optimize(args) -> int:
    config, out = _prepare(args)
    seed = int(config["seed"])
    fleet, train, test = experiments.build_environment(config, seed)
    tcfg = training_from_dict(config["training"], seed=experiments._child_seed(seed, 4))
    report = run_estimation(
        fleet, train, tcfg, list(config["estimation"]["loss_levels"]), test
    )
    instance = OptInstance.from_fleet(
        fleet,
        report.params.grad_norms,
        report.params.bound_ratio,
        floor=float(config["optimizer"]["floor"]),
        grid_step=config["optimizer"]["grid_step"],
    )
    result = optimize_sampling(instance)
    doc = optimizer_report(result, instance)
    doc["estimation"] = report.to_json_dict()
    _write_json(doc, out / "optimizer.json")
    print(
        f"objective {result.objective:.6g} at mean round cost "
        f"{result.round_cost:.6g}s -> {out / 'optimizer.json'}"
    )
    return 0


def cmd_simulate(args) -> int:
    config, out = _prepare(args)
    seed = int(config["seed"])
    outcome = experiments.run_seed(config, seed, schemes=(args.scheme,))
    experiments.emit_results([outcome], out)
    run = outcome.runs[args.scheme]
    _write_json(
        {
            "scheme": args.scheme,
            "seed": seed,
            "reached": run.reached,
            "rounds": run.rounds,
            "run_time_s": run.run_time_s,
            "pilot_time_s": run.pilot_time_s,
            "total_time_s": run.total_time_s,
            "probs": run.probs,
        },
        out / f"{args.scheme}_seed{seed}.json",
    )
    print(
        f"{args.scheme}: {run.rounds} rounds, {run.run_time_s:.1f}s simulated"
        + (f" (target reached)" if run.reached else "")
    )
    return 0


def cmd_compare(args) -> int:
    config, out = _prepare(args)
    seeds = _seed_list(config)
    outcomes, summary = experiments.run_compare(config, seeds)
    experiments.emit_results(outcomes, out, summary)
    for scheme in experiments.SCHEMES:
        stats = summary["schemes"][scheme]["time_to_target_s"]
        label = summary["schemes"][scheme].get("ratio_vs_proposed_label", "-")
        mean = "unreached" if stats["mean"] is None else f"{stats['mean']:.1f}s"
        std = "" if stats["std"] is None else f" +/- {stats['std']:.1f}s"
        print(f"{scheme:>12}: {mean}{std}  ({label})")
    return 0


def cmd_sweep_k(args) -> int:
    config, out = _prepare(args)
    seeds = _seed_list(config)
    k_values = args.k if args.k else [1, 4, 10, 16]
    sweep = experiments.run_sweep_k(config, k_values, seeds)
    _write_json(sweep, out / "sweep_k.json")
    for k in k_values:
        stats = sweep["results"][str(k)]["time_to_target_s"]
        mean = "unreached" if stats["mean"] is None else f"{stats['mean']:.1f}s"
        print(f"K={k:>3}: {mean}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsamp",
        description="Federated-learning wall-clock simulator and client-sampling optimizer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False, scheme=False, k_list=False):
        p.add_argument("--config", default=None, help="JSON config file (defaults built in).")
        p.add_argument("--seed", type=int, default=None, help="Base PRNG seed.")
        p.add_argument("--out", default="out", help="Output directory.")
        p.add_argument("--target-loss", type=float, default=None, dest="target_loss")
        if seeds:
            p.add_argument("--seeds", type=int, default=None, help="Number of seeds to run.")
        if scheme:
            p.add_argument(
                "--scheme", required=True, choices=experiments.SCHEMES, help="Sampling scheme."
            )
        if k_list:
            p.add_argument(
                "--k", type=int, action="append", default=None,
                help="Sampled clients per round; repeat for a sweep (default 1 4 10 16).",
            )
        else:
            p.add_argument("--k", type=int, default=None, help="Sampled clients per round.")

    p = sub.add_parser("gen-data", help="Generate and cache a federated dataset.")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("estimate", help="Run the pilot phase and estimate the bound ratio.")
    common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("optimize", help="Pilots plus sampling optimization.")
    common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="Train once under a named sampling scheme.")
    common(p, scheme=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="All four schemes across shared seeds.")
    common(p, seeds=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("sweep-k", help="Proposed scheme across sampled-set sizes.")
    common(p, seeds=True, k_list=True)
    p.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
