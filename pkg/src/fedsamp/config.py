"""Experiment configuration: defaults, JSON loading, CLI overrides.

One JSON document describes an experiment; command-line flags override
individual keys. The same schema section serializes explicit fleets and
training settings for round-tripping.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .types import ClientProfile, FleetConfig, TrainingConfig, validate_fleet

#: Baseline experiment: synthetic data on a simulated 100-client fleet.
DEFAULT_CONFIG: dict = {
    "dataset": {
        "kind": "synthetic",
        "n_clients": 100,
        "dim": 60,
        "total_samples": 20509,
        "alpha_skew": 1.0,
        "beta_skew": 1.0,
        "num_classes": 10,
        # IDX ingestion (kind == "idx"): paths plus partition controls.
        "images": None,
        "labels": None,
        "subsample": None,
        "classes_per_client": [1, 6],
        "power_law": True,
    },
    "system": {"kind": "exponential", "total_bandwidth": 1.0},
    "fleet": {"sample_size": 10, "local_steps": 50},
    "training": {
        "lr0": 0.1,
        "batch_size": 24,
        "max_rounds": 3000,
        "target_loss": 0.7,
        "l2": 0.0,
    },
    "estimation": {"loss_levels": [1.2, 1.15, 1.1, 1.05, 1.0]},
    "optimizer": {"floor": 1e-6, "grid_step": None},
    "test_fraction": 0.1,
    "seed": 1,
    "seeds": 1,
}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None) -> dict:
    """Defaults merged with the JSON document at ``path`` (when given)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path, encoding="utf-8") as f:
        user = json.load(f)
    return _merge(DEFAULT_CONFIG, user)


def apply_overrides(config: dict, **overrides) -> dict:
    """Apply non-None CLI overrides onto a loaded config."""
    out = copy.deepcopy(config)
    mapping = {
        "seed": ("seed",),
        "seeds": ("seeds",),
        "k": ("fleet", "sample_size"),
        "target_loss": ("training", "target_loss"),
    }
    for name, path in mapping.items():
        value = overrides.get(name)
        if value is None:
            continue
        node = out
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    return out


def fleet_to_dict(fleet: FleetConfig) -> dict:
    return {
        "sample_size": fleet.sample_size,
        "local_steps": fleet.local_steps,
        "total_bandwidth": fleet.total_bandwidth,
        "clients": [
            {
                "index": c.index,
                "weight": c.weight,
                "comp_time": c.comp_time,
                "comm_time": c.comm_time,
                "grad_norm_max": c.grad_norm_max,
            }
            for c in fleet.clients
        ],
    }


def fleet_from_dict(doc: dict) -> FleetConfig:
    clients = tuple(
        ClientProfile(
            index=int(c["index"]),
            weight=float(c["weight"]),
            comp_time=float(c["comp_time"]),
            comm_time=float(c["comm_time"]),
            grad_norm_max=float(c.get("grad_norm_max", 0.0)),
        )
        for c in doc["clients"]
    )
    return validate_fleet(
        FleetConfig(
            clients=clients,
            sample_size=int(doc["sample_size"]),
            local_steps=int(doc["local_steps"]),
            total_bandwidth=float(doc["total_bandwidth"]),
        )
    )


def training_to_dict(cfg: TrainingConfig) -> dict:
    return {
        "lr0": cfg.lr0,
        "batch_size": cfg.batch_size,
        "max_rounds": cfg.max_rounds,
        "target_loss": cfg.target_loss,
        "seed": cfg.seed,
        "l2": cfg.l2,
    }


def training_from_dict(doc: dict, seed: int | None = None) -> TrainingConfig:
    return TrainingConfig(
        lr0=float(doc.get("lr0", 0.1)),
        batch_size=int(doc.get("batch_size", 24)),
        max_rounds=int(doc.get("max_rounds", 500)),
        target_loss=None if doc.get("target_loss") is None else float(doc["target_loss"]),
        seed=int(doc.get("seed", 0) if seed is None else seed),
        l2=float(doc.get("l2", 0.0)),
    )
