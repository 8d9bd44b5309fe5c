"""Bayesian-updating linear noise approximation and its likelihood.

Between observation times the LNA moment ODEs

    d s_bar = mu(s_bar) dt
    d phi   = A(s_bar) phi dt
    d Psi   = (Psi A^T + A Psi + D(s_bar) / Omega) dt,    A = d mu / d s

are integrated with explicit Euler steps.  At each observation time the
Gaussian N(s_bar + phi, Psi) is conditioned on the measurement and, in the
Bayesian-updating variant, the ODEs restart from the posterior (alpha, beta)
with phi = 0.  The log-likelihood is the sum of the one-step predictive log
densities.  Its gradient comes from differentiating the discrete recursion
forward in time, so it is exact for the discretised likelihood.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .data import Dataset
from .network import ReactionNetwork

log = logging.getLogger(__name__)

BAYESIAN_UPDATING = "bayesian_updating"
ORIGINAL_LNA = "original_lna"
VARIANTS = (BAYESIAN_UPDATING, ORIGINAL_LNA)


class FilterError(ArithmeticError):
    """The LNA recursion broke down (non-finite moments or singular innovation)."""


@dataclass
class LnaState:
    """Moments of the LNA at ``time``: s ~ N(mean + pert_mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray
    pert_mean: np.ndarray | None = None
    time: float = 0.0

    def __post_init__(self):
        self.mean = np.array(self.mean, dtype=float).reshape(-1)
        J = len(self.mean)
        self.cov = np.array(self.cov, dtype=float).reshape(J, J)
        if self.pert_mean is None:
            self.pert_mean = np.zeros(J)
        else:
            self.pert_mean = np.array(self.pert_mean, dtype=float).reshape(J)
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("covariance must be symmetric")

    @property
    def total_mean(self) -> np.ndarray:
        return self.mean + self.pert_mean

    def copy(self) -> LnaState:
        return LnaState(self.mean.copy(), self.cov.copy(), self.pert_mean.copy(), self.time)


@dataclass
class Sensitivities:
    """Derivatives of the LNA moments w.r.t. each of the ``L`` parameters.

    Shapes put the parameter axis first: ``d_mean`` and ``d_pert`` are
    (L, J), ``d_cov`` is (L, J, J).
    """

    d_mean: np.ndarray
    d_cov: np.ndarray
    d_pert: np.ndarray | None = None

    def __post_init__(self):
        if self.d_pert is None:
            self.d_pert = np.zeros_like(self.d_mean)

    @classmethod
    def zeros(cls, n_params: int, n_species: int) -> Sensitivities:
        return cls(
            np.zeros((n_params, n_species)),
            np.zeros((n_params, n_species, n_species)),
            np.zeros((n_params, n_species)),
        )

    def copy(self) -> Sensitivities:
        return Sensitivities(self.d_mean.copy(), self.d_cov.copy(), self.d_pert.copy())


@dataclass(frozen=True)
class SolverConfig:
    """Euler discretisation of the moment ODEs.

    ``substeps`` fixes ``I_h`` (one int for all intervals or one per
    interval); otherwise ``I_h = max(1, round(dt_h / dz))``.
    """

    dz: float = 0.01
    substeps: int | tuple[int, ...] | None = None
    jitter: float = 1e-9

    def __post_init__(self):
        if self.substeps is not None and not isinstance(self.substeps, int):
            object.__setattr__(self, "substeps", tuple(int(i) for i in self.substeps))
        if not self.dz > 0:
            raise ValueError("dz must be positive")
        if self.substeps is not None and min(np.atleast_1d(self.substeps)) < 1:
            raise ValueError("substeps must be >= 1")

    def substeps_for(self, intervals) -> np.ndarray:
        intervals = np.asarray(intervals, dtype=float)
        if self.substeps is None:
            steps = np.maximum(1, np.rint(intervals / self.dz))
        elif isinstance(self.substeps, int):
            steps = np.full(len(intervals), self.substeps)
        else:
            if len(self.substeps) != len(intervals):
                raise ValueError("need one substep count per observation interval")
            steps = np.array(self.substeps)
        return steps.astype(np.int64)


@dataclass
class FilterOutput:
    loglik: float
    pred_means: np.ndarray
    pred_covs: np.ndarray
    post_means: np.ndarray
    post_covs: np.ndarray
    times: np.ndarray
    grad: np.ndarray | None = None

    @property
    def final_mean(self) -> np.ndarray:
        return self.post_means[-1]

    @property
    def final_cov(self) -> np.ndarray:
        return self.post_covs[-1]

    def to_csv(self, path) -> None:
        """Per-observation dump of predictive and posterior moments."""
        J = self.pred_means.shape[1]
        iu = np.triu_indices(J)
        cov_cols = [f"{i + 1}{j + 1}" for i, j in zip(*iu)]
        header = (
            ["h", "time"]
            + [f"pred_mean_{j + 1}" for j in range(J)]
            + [f"pred_cov_{c}" for c in cov_cols]
            + [f"post_mean_{j + 1}" for j in range(J)]
            + [f"post_cov_{c}" for c in cov_cols]
        )
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for h, t in enumerate(self.times):
                w.writerow(
                    [h, repr(float(t))]
                    + [repr(float(x)) for x in self.pred_means[h]]
                    + [repr(float(x)) for x in self.pred_covs[h][iu]]
                    + [repr(float(x)) for x in self.post_means[h]]
                    + [repr(float(x)) for x in self.post_covs[h][iu]]
                )


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def lna_predict(
    state: LnaState,
    sens: Sensitivities | None,
    net: ReactionNetwork,
    theta,
    dt: float,
    substeps: int,
) -> tuple[LnaState, Sensitivities | None]:
    """Propagate the moments (and optionally their sensitivities) over ``dt``.

    Sensitivities may carry extra trailing parameters (noise variances); the
    dynamics do not depend on them explicitly.
    """
    if not dt > 0 or substeps < 1:
        raise ValueError("need dt > 0 and substeps >= 1")
    theta = np.ascontiguousarray(theta, dtype=float)
    out = state.copy()
    J = net.species_count
    if sens is None:
        work = Sensitivities.zeros(0, J)
    else:
        work = sens.copy()
    with_pert = bool(np.any(out.pert_mean != 0.0) or np.any(work.d_pert != 0.0))
    status = _kernels.lna_predict(
        net.reactant_matrix, net.param_index, net.stoichiometry, 1.0 / net.system_size, theta,
        out.mean, out.pert_mean, out.cov, work.d_mean, work.d_pert, work.d_cov,
        float(dt), int(substeps), with_pert, sens is not None,
    )
    if status != _kernels.OK:
        raise FilterError("non-finite LNA moments; the Euler step is too large (increase substeps)")
    out.time = state.time + dt
    return out, (work if sens is not None else None)


def _selection_indices(G: np.ndarray) -> np.ndarray:
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if not (np.all((G == 0) | (G == 1)) and np.all(G.sum(axis=1) == 1)):
        raise ValueError("G must be a 0/1 selection matrix with one 1 per row")
    return np.argmax(G, axis=1).astype(np.int64)


def kalman_update(
    state: LnaState,
    sens: Sensitivities | None,
    y,
    G,
    Sigma,
    var_pos: Sequence[int] | None = None,
    jitter: float = 1e-9,
):
    """Condition the LNA prior on one observation vector.

    ``Sigma`` must be diagonal.  When ``sens`` is given, ``var_pos[a]`` names
    the parameter index of the noise variance on ``Sigma[a, a]``.

    Returns:
        (posterior state, posterior sensitivities or None, log predictive
        density, its gradient or None).  The posterior has ``pert_mean = 0``.
    """
    idx = _selection_indices(G)
    y = np.ascontiguousarray(y, dtype=float).reshape(-1)
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    if Sigma.shape != (len(idx), len(idx)) or np.any(Sigma - np.diag(np.diag(Sigma))):
        raise ValueError("Sigma must be a diagonal matrix matching G")
    J = len(state.mean)
    if sens is None:
        pos = np.arange(len(idx), dtype=np.int64)
        work = Sensitivities.zeros(0, J)
    else:
        if var_pos is None:
            raise ValueError("var_pos is required with sensitivities")
        pos = np.asarray(var_pos, dtype=np.int64)
        # the update acts on the total mean s_bar + phi
        work = Sensitivities(sens.d_mean + sens.d_pert, sens.d_cov.copy())
    # the kernel reads each noise variance from its parameter slot
    eta = np.zeros(int(pos.max()) + 1)
    eta[pos] = np.diag(Sigma)
    mean = state.total_mean.copy()
    cov = state.cov.copy()
    grad = np.zeros(work.d_mean.shape[0])
    status, logpred = _kernels.kalman_update(
        mean, cov, work.d_mean, work.d_cov, y, idx, pos, eta,
        sens is not None, True, float(jitter), grad,
    )
    if status != _kernels.OK:
        raise FilterError("innovation covariance is not positive definite")
    post = LnaState(mean, cov, None, state.time)
    if sens is None:
        return post, None, float(logpred), None
    return post, work, float(logpred), grad


# ---------------------------------------------------------------------------
# full likelihood
# ---------------------------------------------------------------------------


class _Problem:
    """Arrays shared by every likelihood evaluation on one dataset."""

    def __init__(self, net: ReactionNetwork, ds: Dataset, init: LnaState, cfg: SolverConfig):
        if len(init.mean) != net.species_count:
            raise ValueError("initial LNA state has the wrong dimension")
        self.net = net
        self.ds = ds
        self.cfg = cfg
        self.init = init
        self.sigma_species = ds.model.observed_species
        self.n_theta = net.param_count
        self.n_params = self.n_theta + len(self.sigma_species)
        if max(self.sigma_species) >= net.species_count:
            raise ValueError("dataset observes a species the network does not have")
        self.obs_ptr, self.obs_idx, self.y = ds.flat()
        spos = {j: self.n_theta + i for i, j in enumerate(self.sigma_species)}
        self.var_pos = np.array([spos[j] for j in self.obs_idx], dtype=np.int64)
        self.dts = ds.model.intervals.astype(float)
        self.substeps = cfg.substeps_for(self.dts)
        self.inv_omega = 1.0 / net.system_size

    def evaluate(self, eta, variant: str, with_grad: bool) -> FilterOutput:
        if variant not in VARIANTS:
            raise ValueError(f"unknown likelihood variant {variant!r}")
        eta = np.ascontiguousarray(eta, dtype=float)
        if eta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {eta.shape}")
        H1 = len(self.ds.observations)
        J = self.net.species_count
        pred_mean = np.empty((H1, J))
        pred_cov = np.empty((H1, J, J))
        post_mean = np.empty((H1, J))
        post_cov = np.empty((H1, J, J))
        grad = np.zeros(self.n_params)
        status, where, loglik = _kernels.run_filter(
            self.net.reactant_matrix, self.net.param_index, self.net.stoichiometry,
            self.inv_omega, eta, self.n_theta,
            self.init.mean, self.init.pert_mean, self.init.cov,
            self.dts, self.substeps, self.obs_ptr, self.obs_idx, self.var_pos, self.y,
            variant == BAYESIAN_UPDATING, with_grad, self.cfg.jitter,
            pred_mean, pred_cov, post_mean, post_cov, grad,
        )
        if status == _kernels.NON_FINITE:
            raise FilterError(f"non-finite LNA moments before observation {where}")
        if status == _kernels.NOT_PD:
            raise FilterError(f"innovation covariance not positive definite at observation {where}")
        return FilterOutput(
            float(loglik), pred_mean, pred_cov, post_mean, post_cov,
            self.ds.model.times.copy(), grad if with_grad else None,
        )


def log_likelihood(
    net: ReactionNetwork,
    ds: Dataset,
    theta,
    sigma,
    init: LnaState,
    cfg: SolverConfig = SolverConfig(),
    variant: str = BAYESIAN_UPDATING,
    grad: bool = False,
) -> FilterOutput:
    """LNA log-likelihood of ``ds`` at kinetic constants ``theta``.

    ``sigma`` holds the noise variances, either in the order of
    ``ds.model.observed_species`` or as a ``{species: variance}`` mapping.
    With ``grad=True`` the output carries the gradient w.r.t.
    ``eta = (theta, sigma)`` on the natural scale.
    """
    problem = _Problem(net, ds, init, cfg)
    if isinstance(sigma, dict):
        sigma = [sigma[j] for j in problem.sigma_species]
    eta = np.concatenate([np.asarray(theta, dtype=float).reshape(-1), np.asarray(sigma, dtype=float).reshape(-1)])
    return problem.evaluate(eta, variant, grad)


# ---------------------------------------------------------------------------
# priors and the posterior target
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError("uniform prior needs high > low")

    def logpdf(self, x: float) -> float:
        if self.low <= x <= self.high:
            return -math.log(self.high - self.low)
        return -math.inf

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class Priors:
    """Independent per-coordinate priors for ``eta = (theta, sigma)``."""

    theta: tuple[Uniform, ...]
    sigma: tuple[Uniform, ...]

    @property
    def components(self) -> tuple[Uniform, ...]:
        return tuple(self.theta) + tuple(self.sigma)

    def logpdf(self, eta) -> float:
        """Log prior density; uniform priors have zero gradient inside the support."""
        return float(sum(p.logpdf(x) for p, x in zip(self.components, eta)))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([p.sample(rng) for p in self.components])


@dataclass
class LnaPosterior:
    """Log posterior of ``eta`` and its gradient, on the natural or log scale.

    Calling the object evaluates the log-scale target
    ``log p(x | D) = log p(eta | D) + sum(x)`` at ``x = log eta`` (the second
    term is the log-Jacobian of ``eta = exp(x)``; ``log_jacobian=False`` drops
    it).  Numerical breakdown of the filter at a point is reported as zero
    density so samplers simply reject it.
    """

    net: ReactionNetwork
    dataset: Dataset
    priors: Priors
    init: LnaState
    solver: SolverConfig = field(default_factory=SolverConfig)
    variant: str = BAYESIAN_UPDATING
    log_jacobian: bool = True

    def __post_init__(self):
        self._problem = _Problem(self.net, self.dataset, self.init, self.solver)
        if len(self.priors.components) != self._problem.n_params:
            raise ValueError(
                f"need {self._problem.n_params} prior components, got {len(self.priors.components)}"
            )
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown likelihood variant {self.variant!r}")

    @property
    def n_params(self) -> int:
        return self._problem.n_params

    @property
    def sigma_species(self) -> tuple[int, ...]:
        return self._problem.sigma_species

    def log_posterior(self, eta, grad: bool = True):
        """``(log p(eta | D), gradient or None)`` on the natural scale."""
        eta = np.asarray(eta, dtype=float)
        lp = self.priors.logpdf(eta)
        if not np.isfinite(lp) or np.any(eta <= 0):
            return -math.inf, None
        try:
            out = self._problem.evaluate(eta, self.variant, grad)
        except FilterError as err:
            log.debug("filter failed at eta=%s: %s", eta, err)
            return -math.inf, None
        return lp + out.loglik, out.grad

    def __call__(self, x, grad: bool = True):
        x = np.asarray(x, dtype=float)
        eta = np.exp(x)
        lp, g = self.log_posterior(eta, grad)
        if not np.isfinite(lp):
            return -math.inf, None
        if self.log_jacobian:
            lp += float(np.sum(x))
        if g is not None:
            g = eta * g + (1.0 if self.log_jacobian else 0.0)
        return lp, g


def log_posterior_and_grad(
    net: ReactionNetwork,
    ds: Dataset,
    eta,
    priors: Priors,
    init: LnaState,
    cfg: SolverConfig = SolverConfig(),
    variant: str = BAYESIAN_UPDATING,
    log_space: bool = False,
    log_jacobian: bool = True,
):
    """Log posterior and gradient at ``eta`` (natural scale input).

    With ``log_space`` the density and gradient refer to ``x = log eta``.
    Returns ``(-inf, None)`` outside the prior support.
    """
    post = LnaPosterior(net, ds, priors, init, cfg, variant, log_jacobian)
    if log_space:
        eta = np.asarray(eta, dtype=float)
        if np.any(eta <= 0):
            return -math.inf, None
        return post(np.log(eta))
    return post.log_posterior(eta)
