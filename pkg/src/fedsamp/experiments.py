"""End-to-end experiment protocols: named schemes, comparisons, K sweeps.

Each seed builds one shared environment (data partition, held-out test
set, system parameters) that every sampling scheme sees identically; the
schemes then train with the same training seed. The two pilot runs feed
both the statistical baseline (gradient norms) and the proposed scheme
(gradient norms plus the bound-ratio estimate), and their simulated time
is charged to those schemes' totals so the comparison stays fair.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import systems
from .config import training_from_dict
from .dataset import (
    FederatedDataset,
    generate_synthetic,
    load_idx,
    partition_noniid,
    subsample,
    train_test_split,
)
from .estimation import EstimationReport, run_estimation
from .runtime import run_training
from .sampling_opt import OptInstance, optimize_sampling
from .types import ClientProfile, FleetConfig, SamplingDistribution, TrainingTrace, validate_fleet
from .wireless import TimeParams, approx_expected_round_time

SCHEMES = ("uniform", "weighted", "statistical", "proposed")
#: Schemes whose distribution depends on the pilot phase.
PILOT_SCHEMES = frozenset({"statistical", "proposed"})

THREADS_ENV = "FEDSAMP_THREADS"


def _child_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def build_dataset(config: dict, seed: int) -> FederatedDataset:
    """The full (pre-split) federated dataset for one seed."""
    ds = config["dataset"]
    data_seed = _child_seed(seed, 1)
    if ds["kind"] == "synthetic":
        return generate_synthetic(
            n_clients=int(ds["n_clients"]),
            dim=int(ds["dim"]),
            total_samples=int(ds["total_samples"]),
            alpha_skew=float(ds["alpha_skew"]),
            beta_skew=float(ds["beta_skew"]),
            seed=data_seed,
            num_classes=int(ds["num_classes"]),
        )
    if ds["kind"] == "idx":
        flat = load_idx(ds["images"], ds["labels"])
        if ds.get("subsample"):
            flat = subsample(flat, int(ds["subsample"]), _child_seed(seed, 5))
        return partition_noniid(
            flat,
            n_clients=int(ds["n_clients"]),
            classes_per_client=tuple(ds["classes_per_client"]),
            power_law=bool(ds["power_law"]),
            seed=data_seed,
        )
    raise ValueError(f"unknown dataset kind {ds['kind']!r}")


def build_environment(config: dict, seed: int):
    """Data partition, test split, system parameters, and validated fleet."""
    full = build_dataset(config, seed)
    train, test = train_test_split(
        full, float(config["test_fraction"]), _child_seed(seed, 2)
    )
    bandwidth = float(config["system"]["total_bandwidth"])
    comp, comm = systems.generate_system(
        config["system"]["kind"],
        train.n_clients,
        np.random.default_rng(_child_seed(seed, 3)),
        total_bandwidth=bandwidth,
    )
    weights = train.weights
    clients = tuple(
        ClientProfile(index=i, weight=float(weights[i]), comp_time=float(comp[i]), comm_time=float(comm[i]))
        for i in range(train.n_clients)
    )
    fleet = validate_fleet(
        FleetConfig(
            clients=clients,
            sample_size=int(config["fleet"]["sample_size"]),
            local_steps=int(config["fleet"]["local_steps"]),
            total_bandwidth=bandwidth,
        )
    )
    return fleet, train, test


def scheme_distribution(
    scheme: str,
    fleet: FleetConfig,
    config: dict,
    report: EstimationReport | None = None,
) -> SamplingDistribution:
    """The sampling distribution a named scheme uses on this fleet."""
    floor = float(config["optimizer"]["floor"])
    if scheme == "uniform":
        return SamplingDistribution.uniform(fleet.n_clients, floor)
    if scheme == "weighted":
        return SamplingDistribution.from_weights(fleet.weights, floor)
    if scheme in PILOT_SCHEMES:
        if report is None:
            raise ValueError(f"scheme {scheme!r} requires the pilot phase")
        grad_norms = report.params.grad_norms
        if scheme == "statistical":
            return SamplingDistribution.from_weights(fleet.weights * grad_norms, floor)
        instance = OptInstance.from_fleet(
            fleet,
            grad_norms,
            report.params.bound_ratio,
            floor=floor,
            grid_step=config["optimizer"]["grid_step"],
        )
        return optimize_sampling(instance).dist
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


@dataclass
class SchemeRun:
    """One scheme's training run within one seed."""

    scheme: str
    trace: TrainingTrace
    probs: list[float]
    reached: bool
    rounds: int
    run_time_s: float
    pilot_time_s: float
    predicted_round_time_s: float
    realized_mean_round_time_s: float

    @property
    def total_time_s(self) -> float:
        return self.run_time_s + self.pilot_time_s


@dataclass
class SeedOutcome:
    """Everything one seed produced across the requested schemes."""

    seed: int
    runs: dict[str, SchemeRun] = field(default_factory=dict)
    estimation: dict | None = None


def run_seed(config: dict, seed: int, schemes=SCHEMES) -> SeedOutcome:
    """Run the requested schemes on one seed's shared environment."""
    for scheme in schemes:
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    fleet, train, test = build_environment(config, seed)
    train_seed = _child_seed(seed, 4)
    tcfg = training_from_dict(config["training"], seed=train_seed)
    time_params = TimeParams.from_fleet(fleet)

    report = None
    if PILOT_SCHEMES & set(schemes):
        report = run_estimation(
            fleet, train, tcfg, list(config["estimation"]["loss_levels"]), test
        )

    outcome = SeedOutcome(seed=seed)
    if report is not None:
        outcome.estimation = report.to_json_dict()
    for scheme in schemes:
        dist = scheme_distribution(scheme, fleet, config, report)
        trace = run_training(fleet, train, dist, tcfg, test)
        reached = bool(
            tcfg.target_loss is not None
            and trace.rounds
            and trace.rounds[-1].global_loss <= tcfg.target_loss
        )
        pilot_time = report.pilot_time_s if scheme in PILOT_SCHEMES else 0.0
        round_times = [rec.round_time_s for rec in trace.rounds]
        outcome.runs[scheme] = SchemeRun(
            scheme=scheme,
            trace=trace,
            probs=[float(v) for v in dist.probs],
            reached=reached,
            rounds=len(trace.rounds),
            run_time_s=trace.total_time_s,
            pilot_time_s=pilot_time,
            predicted_round_time_s=approx_expected_round_time(dist, time_params),
            realized_mean_round_time_s=float(np.mean(round_times)) if round_times else 0.0,
        )
    return outcome


def _worker_count(n_tasks: int) -> int:
    env = os.environ.get(THREADS_ENV)
    workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(workers, n_tasks))


def _run_seed_star(args):
    return run_seed(*args)


def run_seeds(config: dict, seeds: list[int], schemes=SCHEMES) -> list[SeedOutcome]:
    """Run many seeds, in parallel when allowed (FEDSAMP_THREADS caps it)."""
    workers = _worker_count(len(seeds))
    tasks = [(config, seed, tuple(schemes)) for seed in seeds]
    if workers == 1:
        return [run_seed(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_seed_star, tasks))


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    return {
        "n": int(arr.size),
        "mean": float(arr.mean()) if arr.size else None,
        "std": float(arr.std(ddof=1)) if arr.size > 1 else None,
        "min": float(arr.min()) if arr.size else None,
        "max": float(arr.max()) if arr.size else None,
    }


def summarize_compare(outcomes: list[SeedOutcome], schemes=SCHEMES) -> dict:
    """Per-scheme time-to-target statistics, ratios, and the pilot ledger.

    Totals for the pilot-dependent schemes include the pilot phase's
    simulated time. The per-round surrogate gap compares the linear
    round-time approximation against the realized mean round time.
    """
    summary: dict = {"seeds": [o.seed for o in outcomes], "schemes": {}}
    for scheme in schemes:
        runs = [o.runs[scheme] for o in outcomes]
        reached = [r for r in runs if r.reached]
        unreached = [o.seed for o, r in zip(outcomes, runs) if not r.reached]
        entry = {
            "time_to_target_s": _stats([r.total_time_s for r in reached]),
            "run_time_s": _stats([r.run_time_s for r in reached]),
            "pilot_time_s": _stats([r.pilot_time_s for r in reached]),
            "rounds": _stats([float(r.rounds) for r in reached]),
            "unreached_seeds": unreached,
            "surrogate_round_time": {
                "predicted_s": _stats([r.predicted_round_time_s for r in runs]),
                "realized_s": _stats([r.realized_mean_round_time_s for r in runs]),
            },
        }
        summary["schemes"][scheme] = entry

    proposed = summary["schemes"].get("proposed", {}).get("time_to_target_s", {})
    uniform = summary["schemes"].get("uniform", {}).get("time_to_target_s", {})
    for scheme in schemes:
        entry = summary["schemes"][scheme]
        mean = entry["time_to_target_s"]["mean"]
        if proposed.get("mean") and mean is not None:
            ratio = mean / proposed["mean"]
            entry["ratio_vs_proposed"] = ratio
            entry["ratio_vs_proposed_label"] = f"{ratio:.1f}×"
        if uniform.get("mean") and mean is not None:
            entry["speedup_vs_uniform"] = uniform["mean"] / mean
    estimations = [o.estimation for o in outcomes if o.estimation]
    if estimations:
        summary["estimation"] = {
            "pilot_time_s": _stats([e["pilot_time_s"] for e in estimations]),
            "beta_over_alpha": _stats([e["beta_over_alpha"] for e in estimations]),
        }
    return summary


def run_compare(config: dict, seeds: list[int], schemes=SCHEMES):
    outcomes = run_seeds(config, seeds, schemes)
    return outcomes, summarize_compare(outcomes, schemes)


def run_sweep_k(config: dict, k_values: list[int], seeds: list[int]) -> dict:
    """Proposed-scheme time-to-target across sampled-set sizes.

    The pilot phase reruns per K (the round counts and the optimizer's cost
    coefficients both depend on it); its time is reported separately and
    not counted in the sweep's time-to-target.
    """
    sweep: dict = {"k_values": list(k_values), "seeds": list(seeds), "results": {}}
    for k in k_values:
        k_config = json.loads(json.dumps(config))
        k_config["fleet"]["sample_size"] = int(k)
        outcomes = run_seeds(k_config, seeds, schemes=("proposed",))
        runs = [o.runs["proposed"] for o in outcomes]
        reached = [r for r in runs if r.reached]
        sweep["results"][str(k)] = {
            "time_to_target_s": _stats([r.run_time_s for r in reached]),
            "pilot_time_s": _stats([r.pilot_time_s for r in reached]),
            "rounds": _stats([float(r.rounds) for r in reached]),
            "unreached_seeds": [o.seed for o, r in zip(outcomes, runs) if not r.reached],
        }
    return sweep


def trace_to_csv(trace: TrainingTrace, path) -> None:
    """Write one run's per-round records as CSV (header always present)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["round", "cumulative_time_s", "global_loss", "test_accuracy", "round_time_s"]
        )
        for rec in trace.rounds:
            writer.writerow(
                [
                    rec.round_index,
                    repr(rec.cumulative_time_s),
                    repr(rec.global_loss),
                    repr(rec.test_accuracy),
                    repr(rec.round_time_s),
                ]
            )


def emit_results(outcomes: list[SeedOutcome], out_dir, summary: dict | None = None) -> None:
    """Write per-run CSV traces plus the summary JSON under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for outcome in outcomes:
        for scheme, run in outcome.runs.items():
            trace_to_csv(run.trace, out / f"{scheme}_seed{outcome.seed}.csv")
        if outcome.estimation is not None:
            with open(out / f"estimation_seed{outcome.seed}.json", "w", encoding="utf-8") as f:
                json.dump(outcome.estimation, f, indent=2)
    if summary is not None:
        with open(out / "summary.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)
