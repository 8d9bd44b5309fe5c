"""Metropolis-adjusted Langevin and random-walk Metropolis-Hastings samplers.

A *target* is any callable ``target(x, grad=True) -> (logp, gradient)``
returning ``(-inf, None)`` outside its support.  Chains run on unconstrained
(log-scale) coordinates; :func:`run_chain` wires an LNA posterior to them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .data import Dataset
from .lna import BAYESIAN_UPDATING, VARIANTS, LnaPosterior, LnaState, Priors, SolverConfig
from .network import ReactionNetwork
from .ssa import make_rng

MALA = "mala"
MH = "mh"
ALGORITHMS = (MALA, MH)

Target = Callable[..., tuple]


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    step_size: float = 0.001
    burn_in: int = 10_000
    samples: int = 100
    thin: int = 10
    algorithm: str = MALA
    likelihood_variant: str = BAYESIAN_UPDATING
    seed: int | None = None
    drift_clip: float | None = None

    def __post_init__(self):
        if self.drift_clip is not None and not self.drift_clip > 0:
            raise ValueError("drift_clip must be positive")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.burn_in < 0 or self.samples < 1 or self.thin < 1:
            raise ValueError("need burn_in >= 0, samples >= 1 and thin >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.likelihood_variant not in VARIANTS:
            raise ValueError(f"unknown likelihood variant {self.likelihood_variant!r}")

    @property
    def total_iterations(self) -> int:
        return self.burn_in + (self.samples - 1) * self.thin + 1

    @property
    def retained_iterations(self) -> np.ndarray:
        """Iteration numbers ``T0 + (b - 1) * thin + 1`` for ``b = 1..B``."""
        return self.burn_in + np.arange(self.samples) * self.thin + 1


class MCMCStep(NamedTuple):
    x: np.ndarray
    accepted: bool
    logp: float
    grad: np.ndarray | None


def _log_q_langevin(to, frm, grad_frm, step_size):
    r = to - frm - step_size * grad_frm
    return -float(r @ r) / (4.0 * step_size)


def mala_log_ratio(x, logp_x, grad_x, prop, logp_prop, grad_prop, step_size) -> float:
    """Log of ``p(prop) q(x | prop) / (p(x) q(prop | x))`` for the Langevin proposal."""
    return (
        logp_prop - logp_x
        + _log_q_langevin(x, prop, grad_prop, step_size)
        - _log_q_langevin(prop, x, grad_x, step_size)
    )


def _accept(rng, log_ratio) -> bool:
    u = rng.random()
    return bool(u <= math.exp(min(0.0, log_ratio)))


def truncate(grad, clip: float | None) -> np.ndarray:
    """Scale ``grad`` down to Euclidean norm ``clip`` when it is longer."""
    if clip is None:
        return grad
    norm = float(np.sqrt(grad @ grad))
    return grad if norm <= clip else grad * (clip / norm)


def mala_step(x, target: Target, step_size: float, rng, current=None, drift_clip=None) -> MCMCStep:
    """One Langevin proposal ``x + grad * step + sqrt(2 step) * z`` with MH correction.

    ``current`` may carry ``(logp, grad)`` at ``x`` to avoid re-evaluating it.
    With ``drift_clip`` the gradient in the proposal mean is truncated to
    that norm (the MALTA variant); the reverse density uses the same
    truncation, so the chain still targets the exact density.
    """
    x = np.asarray(x, dtype=float)
    logp, grad = target(x) if current is None else current
    if grad is None or not np.isfinite(logp) or not np.all(np.isfinite(grad)):
        raise SamplerError(f"target or its gradient is not finite at the current state {x}")
    z = rng.standard_normal(x.shape)
    drift = truncate(grad, drift_clip)
    prop = x + step_size * drift + math.sqrt(2.0 * step_size) * z
    logp_p, grad_p = target(prop)
    if not np.isfinite(logp_p) or grad_p is None or not np.all(np.isfinite(grad_p)):
        rng.random()
        return MCMCStep(x, False, logp, grad)
    ratio = mala_log_ratio(x, logp, drift, prop, logp_p, truncate(grad_p, drift_clip), step_size)
    if _accept(rng, ratio):
        return MCMCStep(prop, True, logp_p, grad_p)
    return MCMCStep(x, False, logp, grad)


def mh_step(x, target: Target, step_size: float, rng, current=None) -> MCMCStep:
    """Gaussian random-walk proposal with covariance ``2 * step_size * I``."""
    x = np.asarray(x, dtype=float)
    logp = target(x, grad=False)[0] if current is None else current[0]
    if not np.isfinite(logp):
        raise SamplerError(f"target is not finite at the current state {x}")
    prop = x + math.sqrt(2.0 * step_size) * rng.standard_normal(x.shape)
    logp_p = target(prop, grad=False)[0]
    if not np.isfinite(logp_p):
        rng.random()
        return MCMCStep(x, False, logp, None)
    if _accept(rng, logp_p - logp):
        return MCMCStep(prop, True, logp_p, None)
    return MCMCStep(x, False, logp, None)


@dataclass
class Chain:
    """Full iteration history of one chain; row 0 is the initial state."""

    log_trace: np.ndarray
    logpost_trace: np.ndarray
    accepted: np.ndarray
    config: SamplerConfig
    param_names: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def log_samples(self) -> np.ndarray:
        return self.log_trace[self.config.retained_iterations]

    @property
    def samples(self) -> np.ndarray:
        return np.exp(self.log_samples)

    @property
    def accept_count(self) -> int:
        return int(self.accepted[1:].sum())

    @property
    def total_proposals(self) -> int:
        return len(self.accepted) - 1

    @property
    def acceptance_rate(self) -> float:
        return self.accept_count / self.total_proposals

    def to_csv(self, path, header: dict | None = None) -> None:
        """Write every iteration; optional ``header`` goes in a leading comment."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            if header:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
            w = csv.writer(fh)
            w.writerow(["iter", *[f"log_{n}" for n in self.param_names], "logpost", "accepted"])
            for i, (row, lp, acc) in enumerate(zip(self.log_trace, self.logpost_trace, self.accepted)):
                w.writerow([i, *[repr(float(v)) for v in row], repr(float(lp)), int(acc)])


def read_chain_csv(path):
    """Parse a chain CSV into ``(header dict, column names, trace, logpost, accepted)``."""
    header = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if lines and lines[0].startswith("#"):
        for item in lines[0][1:].split():
            k, _, v = item.partition("=")
            header[k] = v
        lines = lines[1:]
    rows = list(csv.reader(lines))
    cols = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    names = tuple(c[len("log_"):] for c in cols[1:-2])
    return header, names, data[:, 1:-2], data[:, -2], data[:, -1].astype(bool)


def sample(target: Target, x0, config: SamplerConfig, rng=None, param_names=()) -> Chain:
    """Run ``config.total_iterations`` steps of the configured sampler from ``x0``."""
    rng = make_rng(config.seed if rng is None else rng)
    if config.algorithm == MALA:
        def step(x, target, step_size, rng, current):
            return mala_step(x, target, step_size, rng, current, config.drift_clip)
    else:
        step = mh_step
    x = np.asarray(x0, dtype=float)
    current = target(x, grad=config.algorithm == MALA)
    T = config.total_iterations
    trace = np.empty((T + 1, len(x)))
    logpost = np.empty(T + 1)
    accepted = np.zeros(T + 1, dtype=bool)
    trace[0], logpost[0] = x, current[0]
    for i in range(1, T + 1):
        res = step(x, target, config.step_size, rng, current)
        x, current = res.x, (res.logp, res.grad)
        trace[i], logpost[i], accepted[i] = x, res.logp, res.accepted
    return Chain(trace, logpost, accepted, config, tuple(param_names))


def initial_state(target: Target, priors: Priors, rng, max_tries: int = 1000) -> np.ndarray:
    """Log of a prior draw at which the target is finite."""
    for _ in range(max_tries):
        x = np.log(priors.sample(rng))
        logp, grad = target(x)
        if np.isfinite(logp) and grad is not None and np.all(np.isfinite(grad)):
            return x
    raise SamplerError(f"no prior draw with finite posterior density in {max_tries} tries")


def param_names(net: ReactionNetwork, sigma_species) -> tuple[str, ...]:
    return tuple(net.param_names) + tuple(f"sigma_{j + 1}" for j in sigma_species)


def run_chain(
    net: ReactionNetwork,
    ds: Dataset,
    priors: Priors,
    init: LnaState,
    solver: SolverConfig,
    config: SamplerConfig,
    log_jacobian: bool = True,
) -> Chain:
    """Posterior sampling of log ``eta`` from a prior draw (retried until finite)."""
    post = LnaPosterior(net, ds, priors, init, solver, config.likelihood_variant, log_jacobian)
    rng = make_rng(config.seed)
    x0 = initial_state(post, priors, rng)
    chain = sample(post, x0, config, rng, param_names(net, post.sigma_species))
    chain.meta["sampler"] = asdict(config)
    return chain


def rmse(log_samples, truth_log) -> np.ndarray:
    """Per-coordinate root-mean-square deviation of log samples from the truth."""
    log_samples = np.atleast_2d(np.asarray(log_samples, dtype=float))
    return np.sqrt(np.mean((log_samples - np.asarray(truth_log, dtype=float)) ** 2, axis=0))
