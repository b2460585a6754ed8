"""Wall-clock cost of one optimization iteration at a given zone count."""
from __future__ import annotations

import time

import numpy as np

from .macro import partition_zones
from .geometry import jacobian_basis
from .optimize import constraint_aggregates, evaluate, quadrature


def iteration_timing(space, design, model, n_zones: int, repeats: int = 3) -> float:
    """Median seconds for zone tensors, macro solve, sensitivities and constraint aggregates."""
    part = partition_zones(space.problem, n_zones)
    qpts, qw = quadrature(space.problem)
    # design-independent, precomputed once per run as in the optimizer loop
    basis_q = jacobian_basis(qpts, space.origin)
    d = np.asarray(design, dtype=float)
    times = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        evaluate(space, d, model, n_zones, partition=part)
        constraint_aggregates(space.mapping(d), qpts, qw, basis=basis_q)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))
