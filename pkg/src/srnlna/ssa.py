"""Exact stochastic simulation (Gillespie direct method) in molecule counts.

Random numbers come from ``numpy.random.Generator`` backed by PCG64, seeded
through ``numpy.random.SeedSequence``; a given seed reproduces the same
trajectory on any platform numpy supports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import ReactionNetwork

DEFAULT_MAX_EVENTS = 10**8


class SimulationError(RuntimeError):
    pass


def make_rng(seed) -> np.random.Generator:
    """PCG64 generator from an int, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Piecewise-constant sample path: ``states[i]`` holds from ``jump_times[i]``."""

    jump_times: np.ndarray
    states: np.ndarray
    initial_state: np.ndarray
    t_end: float

    @property
    def event_count(self) -> int:
        return len(self.jump_times)

    def state_at(self, t: float) -> np.ndarray:
        """Count vector at time ``t`` (value after the last event at or before ``t``)."""
        if t < 0 or t > self.t_end:
            raise SimulationError(f"time {t} outside the simulated horizon [0, {self.t_end}]")
        i = int(np.searchsorted(self.jump_times, t, side="right")) - 1
        return self.initial_state.copy() if i < 0 else self.states[i].copy()

    def to_csv(self, path, species_names=None) -> None:
        J = len(self.initial_state)
        names = list(species_names) if species_names else [f"x{j + 1}" for j in range(J)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time", *names])
            w.writerow([0.0, *self.initial_state.tolist()])
            for t, x in zip(self.jump_times, self.states):
                w.writerow([repr(float(t)), *x.tolist()])


def _propensity_fn(net: ReactionNetwork, theta):
    omega = net.system_size
    reactants = net.reactant_matrix
    rate = np.asarray(theta, dtype=float)[net.param_index]
    # volume factor Omega * Omega^-order turns concentration rates into counts
    scale = rate * omega ** (1.0 - reactants.sum(axis=1))

    def propensities(x):
        a = scale * np.prod(x.astype(float) ** reactants, axis=1)
        # mass action in counts would let a reaction fire without enough molecules
        a[np.any(x < reactants, axis=1)] = 0.0
        return a

    return propensities


def ssa_simulate(
    net: ReactionNetwork,
    theta,
    x0,
    t_end: float,
    rng_seed=None,
    max_events: int = DEFAULT_MAX_EVENTS,
) -> Trajectory:
    """Simulate the Markov jump process on ``[0, t_end]``.

    Stops early when the total propensity vanishes (absorbing state).

    Raises:
        SimulationError: if more than ``max_events`` reactions fire.
    """
    x = np.array(x0, dtype=np.int64)
    if x.shape != (net.species_count,):
        raise ValueError(f"x0 must have length {net.species_count}")
    if np.any(x < 0):
        raise ValueError("initial counts must be non-negative")
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    rng = make_rng(rng_seed)
    prop = _propensity_fn(net, theta)
    changes = net.stoichiometry.T
    x_init = x.copy()

    times: list[float] = []
    states: list[np.ndarray] = []
    t = 0.0
    while True:
        a = prop(x)
        a0 = a.sum()
        if a0 <= 0.0:
            break
        t += rng.exponential(1.0 / a0)
        if t > t_end:
            break
        k = int(np.searchsorted(np.cumsum(a), rng.random() * a0, side="right"))
        k = min(k, len(a) - 1)
        x = x + changes[k]
        times.append(t)
        states.append(x)
        if len(times) > max_events:
            raise SimulationError(f"more than {max_events} events; runaway network?")

    J = net.species_count
    return Trajectory(
        np.array(times, dtype=float),
        np.array(states, dtype=np.int64).reshape(-1, J),
        x_init,
        float(t_end),
    )
