from __future__ import annotations

import numpy as np
import pytest

from srnlna.network import Reaction, build_network, michaelis_menten
from srnlna.ssa import SimulationError, Trajectory, make_rng, ssa_simulate

MM = michaelis_menten()
THETA = (0.001, 0.005, 0.01)
X0 = (45, 39, 55, 6)


def death(system_size=1.0):
    return build_network([Reaction([1], [0], 0)], 1, system_size)


def test_zero_rates_give_no_events():
    tr = ssa_simulate(MM, (0.0, 0.0, 0.0), X0, 10.0, rng_seed=1)
    assert tr.event_count == 0
    np.testing.assert_array_equal(tr.state_at(7.5), X0)


def test_linear_death_mean():
    net = death()
    rng = np.random.SeedSequence(5).spawn(10_000)
    finals = np.array([ssa_simulate(net, [0.05], [100], 20.0, s).state_at(20.0)[0] for s in rng])
    expected = 100 * np.exp(-1.0)
    se = finals.std(ddof=1) / np.sqrt(len(finals))
    assert abs(finals.mean() - expected) < 3 * se


def test_michaelis_menten_trajectory_invariants():
    tr = ssa_simulate(MM, THETA, X0, 80.0, rng_seed=3)
    assert tr.event_count > 0
    assert np.all(np.diff(tr.jump_times) > 0)
    assert tr.jump_times[-1] <= 80.0
    states = np.vstack([tr.initial_state, tr.states])
    assert np.all(states >= 0)
    np.testing.assert_array_equal(states[:, 0] + states[:, 2], 100)
    # every jump is exactly one reaction vector
    cols = {tuple(c) for c in MM.stoichiometry.T}
    assert all(tuple(d) in cols for d in np.diff(states, axis=0))


def test_fixed_seed_is_bit_identical():
    a = ssa_simulate(MM, THETA, X0, 80.0, rng_seed=42)
    b = ssa_simulate(MM, THETA, X0, 80.0, rng_seed=42)
    np.testing.assert_array_equal(a.jump_times, b.jump_times)
    np.testing.assert_array_equal(a.states, b.states)
    c = ssa_simulate(MM, THETA, X0, 80.0, rng_seed=43)
    assert not np.array_equal(a.jump_times[:10], c.jump_times[:10])


def test_state_at_is_cadlag():
    tr = Trajectory(np.array([1.0, 2.0]), np.array([[4], [3]]), np.array([5]), 3.0)
    assert tr.state_at(0.999)[0] == 5
    assert tr.state_at(1.0)[0] == 4
    assert tr.state_at(3.0)[0] == 3
    with pytest.raises(SimulationError):
        tr.state_at(3.5)


def test_absorbing_state_stops_early():
    tr = ssa_simulate(death(), [1.0], [3], 1000.0, rng_seed=0)
    assert tr.event_count == 3
    assert tr.state_at(1000.0)[0] == 0


def test_event_cap():
    birth = build_network([Reaction([0], [1], 0)], 1)
    with pytest.raises(SimulationError):
        ssa_simulate(birth, [1000.0], [0], 10.0, rng_seed=0, max_events=100)


def test_insufficient_molecules_block_dimerisation():
    dimer = build_network([Reaction([2], [0], 0)], 1)
    tr = ssa_simulate(dimer, [1.0], [5], 100.0, rng_seed=0)
    assert tr.state_at(100.0)[0] == 1


def test_invalid_inputs():
    with pytest.raises(ValueError):
        ssa_simulate(MM, THETA, (-1, 0, 0, 0), 1.0)
    with pytest.raises(ValueError):
        ssa_simulate(MM, THETA, X0, 0.0)
    with pytest.raises(ValueError):
        ssa_simulate(MM, THETA, (1, 2), 1.0)


def test_mean_tracks_rate_equation_at_large_volume():
    # birth-death with Omega = 200: counts / Omega approach theta1/theta2 (1 - e^{-theta2 t}) + s0 e^{-theta2 t}
    omega = 200.0
    net = build_network([Reaction([0], [1], 0), Reaction([1], [0], 1)], 1, omega)
    theta, t = (1.0, 0.5), 4.0
    seeds = np.random.SeedSequence(9).spawn(200)
    s = np.array([ssa_simulate(net, theta, [0], t, q).state_at(t)[0] / omega for q in seeds])
    ode = 2.0 * (1 - np.exp(-0.5 * t))
    assert abs(s.mean() - ode) < 4 * s.std(ddof=1) / np.sqrt(len(s)) + 1e-3


def test_make_rng_is_pcg64():
    assert isinstance(make_rng(1).bit_generator, np.random.PCG64)
    g = make_rng(1)
    assert make_rng(g) is g


def test_trajectory_csv(tmp_path):
    tr = ssa_simulate(MM, THETA, X0, 5.0, rng_seed=2)
    tr.to_csv(tmp_path / "t.csv", MM.species_names)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "time,Enzyme,Substrate,Complex,Product"
    assert len(lines) == tr.event_count + 2
