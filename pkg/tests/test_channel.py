import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madnn import channel as ch
from madnn.channel import Scenario

from conftest import random_path_set


def _double_sum(pos, ps):
    n_pos, k_users = len(pos), ps.num_users
    out = np.zeros((n_pos, k_users), complex)
    for n in range(n_pos):
        for k in range(k_users):
            acc = 0j
            for i in range(ps.kappa_t.shape[1]):
                q = np.exp(1j * (ps.kappa_t[k, i, 0] * pos[n, 0] + ps.kappa_t[k, i, 1] * pos[n, 1]))
                for j in range(ps.kappa_r.shape[1]):
                    f = np.exp(1j * np.dot(ps.kappa_r[k, j], ps.user_positions[k]))
                    acc += np.conj(q) * ps.prm[k, i, j] * f
            out[n, k] = acc
    return out


def test_double_sum_oracle_1000_instances():
    # user positions near the origin keep every phase O(10) rad
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        lt, lr, k = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 3)
        ps = random_path_set(rng, k, lt, lr)
        ps.user_positions = rng.uniform(-0.1, 0.1, ps.user_positions.shape)
        pos = rng.uniform(0, 0.2, (3, 2))
        worst = max(worst, np.max(np.abs(ch.instantaneous_channel(pos, ps) - _double_sum(pos, ps))))
    assert worst < 1e-12


def test_double_sum_oracle_far_users():
    # phases of thousands of radians carry ulp-level rounding of their own
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        ps = random_path_set(rng, 2, rng.integers(1, 5), rng.integers(1, 5))
        pos = rng.uniform(0, 0.2, (3, 2))
        phase = np.max(np.abs(ps.kappa_r)) * np.max(np.abs(ps.user_positions)) * 3
        err = np.max(np.abs(ch.instantaneous_channel(pos, ps) - _double_sum(pos, ps)))
        worst = max(worst, err / (phase * np.finfo(float).eps * np.sum(np.abs(ps.prm))))
    assert worst < 4.0


def test_single_path_is_pure_phase():
    rng = np.random.default_rng(1)
    ps = random_path_set(rng, 1, 1, 1)
    ps.prm[:] = 1.0
    ps.user_positions[:] = 0.0
    pos = rng.uniform(0, 1, (5, 2))
    h = ch.instantaneous_channel(pos, ps)[:, 0]
    assert np.allclose(np.abs(h), 1.0, atol=1e-14)
    assert np.allclose(h, np.exp(-1j * pos @ ps.kappa_t[0, 0]), atol=1e-14)


def test_prm_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="does not match"):
        ch.PathSet(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)), np.zeros((1, 3, 3), complex), np.zeros((1, 3)))


def test_wavevector_magnitude():
    k = ch.rx_wavevector(0.3, 1.1, 0.1)
    assert abs(np.linalg.norm(k) - 2 * np.pi / 0.1) < 1e-12
    kt = ch.tx_wavevector(0.0, 0.0, 0.1)
    assert np.allclose(kt, [2 * np.pi / 0.1, 0.0])


def test_statistical_covariance_matches_diag_b():
    rng = np.random.default_rng(2)
    ps = random_path_set(rng, 1, 4, 3)
    psi = ch.draw_path_responses(ps, rng, size=100_000)[:, 0]
    cov = psi.T @ psi.conj() / len(psi)
    b = ps.power[0]
    assert np.max(np.abs(np.diag(cov).real - b) / b) < 0.03
    off = cov - np.diag(np.diag(cov))
    assert np.max(np.abs(off)) < 0.03 * b.max()


def test_statistical_channel_covariance():
    rng = np.random.default_rng(3)
    ps = random_path_set(rng, 1, 3, 2)
    pos = rng.uniform(0, 0.2, (2, 2))
    h = ch.statistical_channel_draw(pos, ps, rng, size=100_000)[:, :, 0]
    emp = h.T @ h.conj() / len(h)
    q = ch.transmit_frm(pos, ps.kappa_t[0])
    ref = q.conj().T @ np.diag(ps.power[0]) @ q
    assert np.max(np.abs(emp - ref)) < 0.03 * np.max(np.abs(ref))


def test_negative_power_rejected():
    rng = np.random.default_rng(4)
    ps = random_path_set(rng, 1, 2, 2)
    ps.power = -np.ones_like(ps.power)
    with pytest.raises(ValueError):
        ch.draw_path_responses(ps, rng)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 1000))
def test_rician_identities(p_los, p_nlos, beta):
    el, en = ch.rician_scale(p_los, p_nlos, beta)
    a, b = el ** 2 * p_los, en ** 2 * p_nlos
    assert abs(a / b - beta) <= 1e-12 * beta
    assert abs((a + b) - (p_los + p_nlos)) <= 1e-12 * (p_los + p_nlos)


def test_rician_examples():
    el, en = ch.rician_scale(0.5, 0.5, 10.0)
    assert abs(el ** 2 * 0.5 - 10 / 11) < 1e-12
    assert abs(en ** 2 * 0.5 - 1 / 11) < 1e-12
    with pytest.raises(ValueError):
        ch.rician_scale(0.0, 1.0, 1.0)


def test_generated_path_set_respects_rician_factor():
    sc = Scenario(rician_factor=10.0, rng_seed=5)
    env = ch.make_environment(sc)
    los, nlos = [], []
    for i in range(400):
        ps = ch.draw_path_set(sc, env, ch.substream(5, 1, i))
        los.append(np.abs(ps.prm[:, 0, 0]) ** 2)
        nlos.append(np.sum(np.abs(ps.prm[:, 1:, 1:]) ** 2, axis=(1, 2)))
    assert np.allclose(los, 10 / 11, atol=1e-12)
    assert abs(np.mean(nlos) - 1 / 11) < 0.1 / 11
    # LoS/NLoS blocks do not couple
    assert np.all(ps.prm[:, 0, 1:] == 0) and np.all(ps.prm[:, 1:, 0] == 0)


def test_grid_shapes():
    sc = Scenario()
    assert sc.grid.dims == (8, 2) and len(sc.grid) == 16
    assert sc.measurement_grid.dims == (4, 1) and len(sc.measurement_grid) == 4
    assert np.allclose(sc.grid.points[1], [0.0, 0.025])
    assert np.allclose(sc.grid.points[2], [0.025, 0.0])


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(noise_power=0.0)
    with pytest.raises(ValueError):
        Scenario(grid_spacing=0.1, measurement_spacing=0.05)
    with pytest.raises(ValueError):
        Scenario(tx_paths=0)
    with pytest.raises(ValueError, match="scatterers"):
        ch.make_environment(Scenario(num_scatterers=1, tx_paths=4))


def test_scenario_dict_roundtrip():
    sc = Scenario(rician_factor=3.0, region_size=(0.2, 0.05), rng_seed=9)
    assert Scenario.from_dict(sc.to_dict()) == sc


def test_environment_deterministic_and_clear_of_bs():
    sc = Scenario(rng_seed=11)
    a, b = ch.make_environment(sc), ch.make_environment(sc)
    assert np.array_equal(a, b)
    assert np.all(np.linalg.norm(a - np.array(sc.bs_position), axis=1) > 1.0)
    assert not np.array_equal(a, ch.make_environment(Scenario(rng_seed=12)))


def test_generate_scenario_deterministic():
    sc = Scenario(rng_seed=13)
    _, p1 = ch.generate_scenario(sc, ch.substream(13, 1, 0))
    _, p2 = ch.generate_scenario(sc, ch.substream(13, 1, 0))
    assert np.array_equal(p1.prm, p2.prm) and np.array_equal(p1.kappa_t, p2.kappa_t)


def test_sample_channels_grid_consistency():
    sc = Scenario(rng_seed=14)
    _, ps = ch.generate_scenario(sc, ch.substream(14, 1, 0))
    smp = ch.sample_channels(sc, ps)
    # measurement points lie on the fine grid (every other column, bottom row)
    fine = {tuple(np.round(p, 9)): i for i, p in enumerate(sc.grid.points)}
    for j, p in enumerate(sc.measurement_grid.points):
        assert np.allclose(smp.h_meas[j], smp.h_grid[fine[tuple(np.round(p, 9))]], atol=1e-14)
    stat = ch.sample_channels(sc, ps, ch.substream(14, 3, 0, 0), statistical=True)
    assert stat.h_grid.shape == (16, 2)


def test_statistical_channel_uses_tx_paths_only():
    # the statistical channel does not depend on the receive geometry
    rng = np.random.default_rng(15)
    ps = random_path_set(rng, 2, 3, 3)
    pos = rng.uniform(0, 0.2, (4, 2))
    psi = ch.draw_path_responses(ps, rng)
    h1 = ch.channel_from_responses(pos, ps, psi)
    ps.user_positions += 10.0
    ps.kappa_r *= -1
    assert np.array_equal(h1, ch.channel_from_responses(pos, ps, psi))
