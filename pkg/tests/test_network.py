from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srnlna.network import (
    NetworkError,
    ParameterVector,
    Reaction,
    birth_death,
    build_network,
    conservation_laws,
    diffusion_grad_params,
    diffusion_jacobian_state,
    diffusion_matrix,
    drift,
    drift_grad_params,
    drift_jacobian_grad_params,
    drift_jacobian_jacobian_state,
    drift_jacobian_state,
    load_network,
    michaelis_menten,
    network_from_dict,
    network_to_dict,
    propensities,
    rate_grad_params,
    rate_jacobian_state,
    reaction_rates,
    save_network,
)

MM = michaelis_menten()
S0 = np.array([45.0, 39.0, 55.0, 6.0])
THETA = np.array([0.001, 0.005, 0.01])


def fd(f, x, rel=1e-6):
    """Central differences along every coordinate; stacked on the last axis."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(len(x)):
        h = rel * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def assert_rel(a, b, tol):
    scale = max(np.max(np.abs(b)), 1e-12)
    assert np.max(np.abs(a - b)) / scale < tol


class TestBuild:
    def test_michaelis_menten_stoichiometry(self):
        expected = [[-1, 1, 1], [-1, 1, 0], [1, -1, -1], [0, 0, 1]]
        np.testing.assert_array_equal(MM.stoichiometry, expected)

    def test_single_birth(self):
        net = build_network([Reaction([0], [1], 0)], 1)
        np.testing.assert_array_equal(net.stoichiometry, [[1]])

    def test_zero_reaction_vector(self):
        with pytest.raises(NetworkError, match="zero reaction vector"):
            Reaction([1, 0], [1, 0], 0)

    def test_length_mismatch(self):
        with pytest.raises(NetworkError):
            build_network([Reaction([1, 0, 0], [0, 1, 0], 0)], 2)

    def test_negative_coefficient(self):
        with pytest.raises(NetworkError):
            Reaction([-1], [0], 0)

    def test_bad_system_size(self):
        with pytest.raises(NetworkError):
            build_network([Reaction([1], [0], 0)], 1, system_size=0.0)

    def test_column_is_net_change(self):
        for k, r in enumerate(MM.reactions):
            np.testing.assert_array_equal(MM.stoichiometry[:, k], np.subtract(r.product_coeffs, r.reactant_coeffs))

    def test_shared_parameter(self):
        net = build_network([Reaction([1], [0], 0), Reaction([0], [1], 0)], 1)
        assert net.param_count == 1


class TestRates:
    def test_rates_at_initial_state(self):
        np.testing.assert_allclose(reaction_rates(MM, S0, THETA), [1.755, 0.275, 0.55], rtol=1e-12)

    def test_drift_at_initial_state(self):
        np.testing.assert_allclose(drift(MM, S0, THETA), [-0.93, -1.48, 0.93, 0.55], rtol=1e-12)

    def test_diffusion_first_entry(self):
        assert diffusion_matrix(MM, S0, THETA)[0, 0] == pytest.approx(2.58, rel=1e-12)

    def test_partials(self):
        assert rate_jacobian_state(MM, S0, THETA)[0, 0] == pytest.approx(0.039, rel=1e-12)
        assert rate_grad_params(MM, S0, THETA)[0, 0] == pytest.approx(1755.0, rel=1e-12)
        # theta_2 does not scale reaction 1
        assert rate_grad_params(MM, S0, THETA)[0, 1] == 0.0

    def test_zero_theta(self):
        z = np.zeros(3)
        assert not reaction_rates(MM, S0, z).any()
        assert not drift(MM, S0, z).any()
        assert not diffusion_matrix(MM, S0, z).any()
        assert not drift_jacobian_state(MM, S0, z).any()

    def test_empty_system(self):
        assert not reaction_rates(MM, np.zeros(4), THETA).any()

    def test_scalar_diffusion(self):
        net = build_network([Reaction([0], [1], 0)], 1)
        np.testing.assert_allclose(diffusion_matrix(net, [3.0], [0.7]), [[0.7]])

    def test_negative_state_clamps_rate_and_derivatives(self):
        s = np.array([-1.0, 5.0, 2.0, 0.0])
        v = reaction_rates(MM, s, THETA)
        assert v[0] == 0.0
        assert np.all(rate_jacobian_state(MM, s, THETA)[0] == 0.0)
        assert np.all(rate_grad_params(MM, s, THETA)[0] == 0.0)

    def test_conservation_drift(self):
        mu = drift(MM, S0, THETA)
        assert mu[0] + mu[2] == pytest.approx(0.0, abs=1e-15)


class TestPropensities:
    def test_unit_volume(self):
        x = np.array([45, 39, 55, 6])
        np.testing.assert_allclose(propensities(MM, x, THETA), reaction_rates(MM, x, THETA))

    def test_linear_rate_volume_invariant(self):
        net = build_network([Reaction([1], [0], 0)], 1, system_size=2.0)
        assert propensities(net, [10], [0.3])[0] == pytest.approx(3.0)

    def test_no_reactant_molecules(self):
        assert propensities(MM, np.zeros(4), THETA)[0] == 0.0


_rng = np.random.default_rng(11)
DRAWS = [(_rng.uniform(0.1, 100, 4), _rng.uniform(1e-4, 1, 3)) for _ in range(100)]


class TestDerivatives:
    @pytest.mark.parametrize("s,theta", DRAWS[::10])
    def test_rate_partials(self, s, theta):
        assert_rel(rate_jacobian_state(MM, s, theta), fd(lambda x: reaction_rates(MM, x, theta), s), 1e-6)
        assert_rel(rate_grad_params(MM, s, theta), fd(lambda p: reaction_rates(MM, s, p), theta), 1e-6)

    def test_all_derivatives_on_random_draws(self):
        for s, theta in DRAWS:
            assert_rel(drift_jacobian_state(MM, s, theta), fd(lambda x: drift(MM, x, theta), s), 1e-5)
            assert_rel(drift_grad_params(MM, s, theta), fd(lambda p: drift(MM, s, p), theta), 1e-5)
            num = np.moveaxis(fd(lambda p: diffusion_matrix(MM, s, p), theta), -1, 0)
            assert_rel(diffusion_grad_params(MM, s, theta), num, 1e-5)
            num = np.moveaxis(fd(lambda x: diffusion_matrix(MM, x, theta), s), -1, 0)
            assert_rel(diffusion_jacobian_state(MM, s, theta), num, 1e-5)
            num = np.moveaxis(fd(lambda p: drift_jacobian_state(MM, s, p), theta), -1, 0)
            assert_rel(drift_jacobian_grad_params(MM, s, theta), num, 1e-5)
            num = np.moveaxis(fd(lambda x: drift_jacobian_state(MM, x, theta), s), -1, 0)
            assert_rel(drift_jacobian_jacobian_state(MM, s, theta), num, 1e-5)

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(0.0, 100.0), min_size=4, max_size=4),
        st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3),
    )
    def test_diffusion_psd_and_conservation(self, s, theta):
        D = diffusion_matrix(MM, s, theta)
        np.testing.assert_array_equal(D, D.T)
        # PSD: a rank-deficient D needs a tiny shift for the factorisation to exist
        np.linalg.cholesky(D + 1e-9 * (1 + np.trace(D)) * np.eye(4))
        assert np.linalg.eigvalsh(D).min() >= -1e-9 * (1 + np.abs(D).max())
        for u in conservation_laws(MM):
            assert abs(u @ drift(MM, s, theta)) <= 1e-9 * (1 + np.abs(drift(MM, s, theta)).max())
            assert abs(u @ D @ u) <= 1e-9 * (1 + np.abs(D).max())


class TestConservation:
    def test_michaelis_menten_has_two_laws(self):
        U = conservation_laws(MM)
        assert U.shape == (2, 4)
        np.testing.assert_allclose(U @ MM.stoichiometry, 0, atol=1e-12)

    def test_enzyme_plus_complex_in_span(self):
        U = conservation_laws(MM)
        u = np.array([1.0, 0, 1, 0])
        coef, *_ = np.linalg.lstsq(U.T, u, rcond=None)
        np.testing.assert_allclose(U.T @ coef, u, atol=1e-12)

    def test_birth_death_has_none(self):
        assert conservation_laws(birth_death()).shape[0] == 0


class TestParameterVector:
    def test_eta_and_log(self):
        p = ParameterVector(THETA, [4.0], (2,))
        np.testing.assert_allclose(p.eta, [0.001, 0.005, 0.01, 4.0])
        assert p.size == 4
        np.testing.assert_allclose(p.log(), np.log(p.eta))

    def test_round_trip(self):
        p = ParameterVector.from_eta([0.1, 0.2, 3.0], 2, (0,))
        np.testing.assert_allclose(p.theta, [0.1, 0.2])

    def test_positive(self):
        with pytest.raises(ValueError):
            ParameterVector([0.0], [1.0], (0,))


class TestJson:
    def test_round_trip(self, tmp_path):
        save_network(MM, tmp_path / "mm.json")
        assert load_network(tmp_path / "mm.json") == MM

    def test_document_shape(self):
        doc = network_to_dict(MM)
        assert doc["species"] == ["Enzyme", "Substrate", "Complex", "Product"]
        assert doc["reactions"][0] == {
            "reactants": {"Enzyme": 1, "Substrate": 1},
            "products": {"Complex": 1},
            "param": "theta1",
        }
        assert network_from_dict(json.loads(json.dumps(doc))) == MM

    def test_unknown_keys(self):
        doc = network_to_dict(MM)
        doc["colour"] = "red"
        with pytest.raises(NetworkError):
            network_from_dict(doc)
        doc = network_to_dict(MM)
        doc["reactions"][0]["rate"] = 1
        with pytest.raises(NetworkError):
            network_from_dict(doc)

    def test_unknown_species(self):
        doc = network_to_dict(MM)
        doc["reactions"][0]["reactants"] = {"Inhibitor": 1}
        with pytest.raises(NetworkError):
            network_from_dict(doc)
