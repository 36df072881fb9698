"""Heterogeneous system-parameter generators for simulated fleets."""

from __future__ import annotations

import numpy as np


def exponential_system(
    n: int,
    rng: np.random.Generator,
    mean_comp_s: float = 1.0,
    mean_comm_s: float = 1.0,
    total_bandwidth: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Exponentially distributed computation and full-bandwidth upload times.

    Upload times are drawn as seconds at full bandwidth, then rescaled to
    unit-bandwidth communication times. Returns (comp_times, comm_times).
    """
    comp = rng.exponential(mean_comp_s, size=n)
    comm = rng.exponential(mean_comm_s, size=n) * total_bandwidth
    return comp, comm


def prototype_system(
    n: int,
    rng: np.random.Generator,
    comp_s: float = 0.5,
    comm_low_s: float = 0.22,
    comm_high_s: float = 5.04,
    total_bandwidth: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Testbed-like times: equal computation, uniformly spread uploads."""
    comp = np.full(n, comp_s)
    comm = rng.uniform(comm_low_s, comm_high_s, size=n) * total_bandwidth
    return comp, comm


GENERATORS = {
    "exponential": exponential_system,
    "prototype": prototype_system,
}


def generate_system(kind: str, n: int, rng: np.random.Generator, total_bandwidth: float = 1.0):
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ValueError(
            f"unknown system kind {kind!r}; expected one of {sorted(GENERATORS)}"
        ) from None
    return gen(n, rng, total_bandwidth=total_bandwidth)
