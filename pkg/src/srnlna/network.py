"""Reaction networks with mass-action kinetics.

A network is a list of reactions ``sum_j p_kj X_j -> sum_j q_kj X_j`` whose
rate in concentration units is ``v_k(s) = theta_{n(k)} * prod_j s_j**p_kj``.
The drift of the diffusion approximation is ``mu = C v`` and its diffusion
matrix ``D = C diag(v) C^T``, with ``C`` the stoichiometry matrix.

All functions here are pure; derivatives are closed-form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels


class NetworkError(ValueError):
    """Raised for an invalid reaction network definition."""


@dataclass(frozen=True)
class Reaction:
    reactant_coeffs: tuple[int, ...]
    product_coeffs: tuple[int, ...]
    rate_param_index: int

    def __post_init__(self):
        object.__setattr__(self, "reactant_coeffs", tuple(int(c) for c in self.reactant_coeffs))
        object.__setattr__(self, "product_coeffs", tuple(int(c) for c in self.product_coeffs))
        if len(self.reactant_coeffs) != len(self.product_coeffs):
            raise NetworkError("coefficient length mismatch between reactants and products")
        if any(c < 0 for c in self.reactant_coeffs + self.product_coeffs):
            raise NetworkError("stoichiometric coefficients must be non-negative")
        if self.reactant_coeffs == self.product_coeffs:
            raise NetworkError("zero reaction vector")
        if self.rate_param_index < 0:
            raise NetworkError("rate_param_index must be non-negative")

    @property
    def change(self) -> np.ndarray:
        return np.subtract(self.product_coeffs, self.reactant_coeffs)


@dataclass(frozen=True, eq=False)
class ReactionNetwork:
    """Immutable reaction network; build it with :func:`build_network`."""

    species_count: int
    reactions: tuple[Reaction, ...]
    system_size: float = 1.0
    species_names: tuple[str, ...] = ()
    param_names: tuple[str, ...] = ()
    stoichiometry: np.ndarray = field(init=False, repr=False)
    reactant_matrix: np.ndarray = field(init=False, repr=False)
    param_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        stoich = np.column_stack([r.change for r in self.reactions]).astype(np.int64)
        reactants = np.array([r.reactant_coeffs for r in self.reactions], dtype=np.int64)
        pidx = np.array([r.rate_param_index for r in self.reactions], dtype=np.int64)
        for arr in (stoich, reactants, pidx):
            arr.flags.writeable = False
        object.__setattr__(self, "stoichiometry", stoich)
        object.__setattr__(self, "reactant_matrix", reactants)
        object.__setattr__(self, "param_index", pidx)

    @property
    def reaction_count(self) -> int:
        return len(self.reactions)

    @property
    def param_count(self) -> int:
        return int(self.param_index.max()) + 1

    def __eq__(self, other):
        if not isinstance(other, ReactionNetwork):
            return NotImplemented
        return (
            self.species_count == other.species_count
            and self.reactions == other.reactions
            and self.system_size == other.system_size
            and self.species_names == other.species_names
            and self.param_names == other.param_names
        )

    def __hash__(self):
        return hash((self.species_count, self.reactions, self.system_size))


def build_network(
    reactions: Sequence[Reaction],
    species_count: int,
    system_size: float = 1.0,
    species_names: Sequence[str] | None = None,
    param_names: Sequence[str] | None = None,
) -> ReactionNetwork:
    """Validate reactions and assemble the network.

    Raises:
        NetworkError: on a zero reaction vector, a coefficient vector whose
            length differs from ``species_count``, ``system_size <= 0`` or an
            unused kinetic parameter index.
    """
    if species_count < 1:
        raise NetworkError("need at least one species")
    if not reactions:
        raise NetworkError("need at least one reaction")
    if not system_size > 0:
        raise NetworkError("system size must be positive")
    for k, r in enumerate(reactions):
        if len(r.reactant_coeffs) != species_count:
            raise NetworkError(f"reaction {k}: coefficient length mismatch")
    used = {r.rate_param_index for r in reactions}
    if used != set(range(len(used))):
        raise NetworkError("rate parameter indices must be 0..N-1 without gaps")
    names = tuple(species_names) if species_names else tuple(f"X{j + 1}" for j in range(species_count))
    if len(names) != species_count:
        raise NetworkError("species_names length must equal species_count")
    pnames = tuple(param_names) if param_names else tuple(f"theta{n + 1}" for n in range(len(used)))
    if len(pnames) != len(used):
        raise NetworkError("param_names length must equal the number of rate parameters")
    return ReactionNetwork(species_count, tuple(reactions), float(system_size), names, pnames)


@dataclass(frozen=True)
class ParameterVector:
    """Kinetic constants plus measurement-noise variances, ``eta = (theta, sigma)``.

    ``sigma_species`` lists (0-based) the observed species each variance
    belongs to, in the same order as ``sigma``.
    """

    theta: np.ndarray
    sigma: np.ndarray
    sigma_species: tuple[int, ...]

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float).reshape(-1)
        if len(sigma) != len(self.sigma_species):
            raise ValueError("one noise variance per observed species is required")
        if np.any(theta <= 0) or np.any(sigma <= 0):
            raise ValueError("all parameters must be strictly positive")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "sigma_species", tuple(int(j) for j in self.sigma_species))

    @property
    def eta(self) -> np.ndarray:
        return np.concatenate([self.theta, self.sigma])

    @property
    def size(self) -> int:
        return len(self.theta) + len(self.sigma)

    def log(self) -> np.ndarray:
        return np.log(self.eta)

    @classmethod
    def from_eta(cls, eta, n_theta: int, sigma_species) -> ParameterVector:
        eta = np.asarray(eta, dtype=float)
        return cls(eta[:n_theta], eta[n_theta:], tuple(sigma_species))


# ---------------------------------------------------------------------------
# rates and derivatives
# ---------------------------------------------------------------------------


def _rate_arrays(net: ReactionNetwork, s, theta, order: int):
    s = np.ascontiguousarray(s, dtype=float)
    theta = np.ascontiguousarray(theta, dtype=float)
    if s.shape != (net.species_count,):
        raise ValueError(f"state must have shape ({net.species_count},)")
    if theta.shape != (net.param_count,):
        raise ValueError(f"theta must have shape ({net.param_count},)")
    K, J = net.reaction_count, net.species_count
    v = np.empty(K)
    mono = np.empty(K)
    jac = np.empty((K, J))
    dmono = np.empty((K, J))
    hess = np.empty((K, J, J))
    _kernels.mass_action(net.reactant_matrix, net.param_index, theta, s, order, v, mono, jac, dmono, hess)
    return v, mono, jac, dmono, hess


def _param_onehot(net: ReactionNetwork) -> np.ndarray:
    """(K, N) indicator of which parameter scales which reaction."""
    out = np.zeros((net.reaction_count, net.param_count))
    out[np.arange(net.reaction_count), net.param_index] = 1.0
    return out


def reaction_rates(net: ReactionNetwork, s, theta) -> np.ndarray:
    """Mass-action rates ``v(s; theta)``, negative values clamped to 0."""
    return _rate_arrays(net, s, theta, 0)[0]


def rate_jacobian_state(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``dv_k/ds_j`` as a (K, J) array."""
    return _rate_arrays(net, s, theta, 1)[2]


def rate_grad_params(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``dv_k/dtheta_n`` as a (K, N) array."""
    mono = _rate_arrays(net, s, theta, 0)[1]
    return _param_onehot(net) * mono[:, None]


def drift(net: ReactionNetwork, s, theta) -> np.ndarray:
    return net.stoichiometry @ reaction_rates(net, s, theta)


def diffusion_matrix(net: ReactionNetwork, s, theta) -> np.ndarray:
    C = net.stoichiometry
    v = reaction_rates(net, s, theta)
    return (C * v) @ C.T


def drift_jacobian_state(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``A_ij = d mu_i / d s_j``."""
    return net.stoichiometry @ rate_jacobian_state(net, s, theta)


def drift_grad_params(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``d mu_i / d theta_n`` as a (J, N) array."""
    return net.stoichiometry @ rate_grad_params(net, s, theta)


def diffusion_grad_params(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``dD/dtheta_n`` stacked as an (N, J, J) array."""
    C = net.stoichiometry
    dv = rate_grad_params(net, s, theta)
    return np.einsum("ik,kn,jk->nij", C, dv, C)


def diffusion_jacobian_state(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``dD/ds_m`` stacked as a (J, J, J) array indexed ``[m, i, j]``."""
    C = net.stoichiometry
    jac = rate_jacobian_state(net, s, theta)
    return np.einsum("ik,km,jk->mij", C, jac, C)


def drift_jacobian_grad_params(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``dA/dtheta_n`` stacked as an (N, J, J) array."""
    _, _, _, dmono, _ = _rate_arrays(net, s, theta, 1)
    onehot = _param_onehot(net)
    return np.einsum("ik,kn,kj->nij", net.stoichiometry, onehot, dmono)


def drift_jacobian_jacobian_state(net: ReactionNetwork, s, theta) -> np.ndarray:
    """``dA/ds_m`` stacked as a (J, J, J) array indexed ``[m, i, j]``."""
    hess = _rate_arrays(net, s, theta, 2)[4]
    return np.einsum("ik,kjm->mij", net.stoichiometry, hess)


def propensities(net: ReactionNetwork, x, theta) -> np.ndarray:
    """Propensities in molecule counts, ``omega = Omega * v(x / Omega)``."""
    omega = net.system_size
    return omega * reaction_rates(net, np.asarray(x, dtype=float) / omega, theta)


def conservation_laws(net: ReactionNetwork, tol: float = 1e-10) -> np.ndarray:
    """Basis of left null vectors ``u`` with ``u^T C = 0`` (rows of the result)."""
    C = net.stoichiometry.astype(float)
    u, sv, _ = np.linalg.svd(C)
    rank = int(np.sum(sv > tol))
    return u[:, rank:].T


# ---------------------------------------------------------------------------
# JSON definition files
# ---------------------------------------------------------------------------

_NETWORK_KEYS = {"species", "omega", "reactions"}
_REACTION_KEYS = {"reactants", "products", "param"}


def network_from_dict(doc: dict) -> ReactionNetwork:
    """Build a network from its JSON document form.

    Parameters are numbered in order of first appearance of their names.
    """
    if not isinstance(doc, dict):
        raise NetworkError("network document must be an object")
    unknown = set(doc) - _NETWORK_KEYS
    if unknown:
        raise NetworkError(f"unknown network keys: {sorted(unknown)}")
    for key in ("species", "reactions"):
        if key not in doc:
            raise NetworkError(f"missing network key {key!r}")
    species = list(doc["species"])
    if len(set(species)) != len(species):
        raise NetworkError("duplicate species names")
    pos = {name: j for j, name in enumerate(species)}
    params: dict[str, int] = {}
    reactions = []
    for k, rdoc in enumerate(doc["reactions"]):
        unknown = set(rdoc) - _REACTION_KEYS
        if unknown:
            raise NetworkError(f"reaction {k}: unknown keys {sorted(unknown)}")
        if "param" not in rdoc:
            raise NetworkError(f"reaction {k}: missing 'param'")
        coeffs = []
        for side in ("reactants", "products"):
            vec = [0] * len(species)
            for name, c in rdoc.get(side, {}).items():
                if name not in pos:
                    raise NetworkError(f"reaction {k}: unknown species {name!r}")
                if int(c) != c:
                    raise NetworkError(f"reaction {k}: non-integer coefficient for {name!r}")
                vec[pos[name]] = int(c)
            coeffs.append(vec)
        pidx = params.setdefault(rdoc["param"], len(params))
        reactions.append(Reaction(coeffs[0], coeffs[1], pidx))
    return build_network(
        reactions, len(species), float(doc.get("omega", 1.0)), species, list(params)
    )


def network_to_dict(net: ReactionNetwork) -> dict:
    reactions = []
    for r in net.reactions:
        reactions.append(
            {
                "reactants": {net.species_names[j]: c for j, c in enumerate(r.reactant_coeffs) if c},
                "products": {net.species_names[j]: c for j, c in enumerate(r.product_coeffs) if c},
                "param": net.param_names[r.rate_param_index],
            }
        )
    return {"species": list(net.species_names), "omega": net.system_size, "reactions": reactions}


def load_network(path) -> ReactionNetwork:
    with open(path, encoding="utf-8") as fh:
        return network_from_dict(json.load(fh))


def save_network(net: ReactionNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# stock networks
# ---------------------------------------------------------------------------


def michaelis_menten() -> ReactionNetwork:
    """Enzyme + Substrate <-> Complex -> Enzyme + Product."""
    return build_network(
        [
            Reaction((1, 1, 0, 0), (0, 0, 1, 0), 0),
            Reaction((0, 0, 1, 0), (1, 1, 0, 0), 1),
            Reaction((0, 0, 1, 0), (1, 0, 0, 1), 2),
        ],
        species_count=4,
        species_names=("Enzyme", "Substrate", "Complex", "Product"),
    )


def birth_death() -> ReactionNetwork:
    """Immigration 0 -> X at rate theta1 and death X -> 0 at rate theta2 * x."""
    return build_network(
        [Reaction((0,), (1,), 0), Reaction((1,), (0,), 1)],
        species_count=1,
        species_names=("X",),
    )
