"""CartPole and RSCP dynamics, stepping, termination."""

import numpy as np
import pytest

from bkmpc import simulators as sim


def test_cartpole_equilibrium():
    cfg = sim.preset("cartpole-ti")
    d = sim.cartpole_deriv(cfg, np.zeros(4), 0.0, 0.0)
    assert np.allclose(d, 0.0, atol=1e-15)


def test_cartpole_full_force_derivative():
    # frictionless closed form with g=10, m_c=1, m_p=0.1, l=0.5:
    # thetadd = (-F/1.1) / (0.5*(4/3 - 0.1/1.1)), xdd = (F + 0.05*(-thetadd))/1.1
    cfg = sim.preset("cartpole-ti")
    d = sim.cartpole_deriv(cfg, np.zeros(4), 20.0, 0.0)
    assert abs(d[1] - 19.512) < 1e-3
    assert abs(d[3] - (-29.268)) < 1e-3


def test_cartpole_tv_matches_ti_when_modifier_vanishes():
    tv = sim.preset("cartpole-tv")
    ti = sim.preset("cartpole-ti", mu_cart=5e-4, mu_pole=2e-6)
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = rng.uniform([-2, -1, -0.3, -1], [2, 1, 0.3, 1])
        f = rng.uniform(-20, 20)
        t = rng.integers(0, 100) * np.pi  # sin(omega*t) = 0 at omega = 1
        a = sim.cartpole_deriv(tv, s, f, t)
        b = sim.cartpole_deriv(ti, s, f, 0.0)
        assert np.allclose(a, b, atol=1e-9)


def test_cartpole_energy_drift_second_order():
    # F = 0, no friction: one Euler step changes total energy by O(dt^2)
    cfg = sim.preset("cartpole-ti")
    mc, mp, length, g = cfg.cart_mass, cfg.pole_mass, cfg.half_length, cfg.gravity

    def energy(s):
        x, xd, th, thd = s
        kin = (
            0.5 * (mc + mp) * xd**2
            + mp * length * xd * thd * np.cos(th)
            + (2.0 / 3.0) * mp * length**2 * thd**2
        )
        return kin + mp * g * length * np.cos(th)

    s0 = np.array([0.3, 0.4, 0.2, -0.5])
    drifts = []
    for dt in (0.02, 0.01):
        cfg_dt = sim.preset("cartpole-ti", dt=dt)
        s1, _ = sim.step_euler(cfg_dt, s0, np.zeros(1), 0.0)
        drifts.append(abs(energy(s1) - energy(s0)))
    ratio = drifts[0] / drifts[1]
    assert 3.0 < ratio < 5.0


def test_rscp_steady_state_residual():
    cfg = sim.preset("rscp-ti")
    res = sim.steady_state_residual(cfg)
    assert np.max(np.abs(res[[2, 5, 8]])) < 1e-6
    assert np.max(np.abs(res[[0, 1, 3, 4, 6, 7]])) < 4e-3


def test_rscp_nominal_duty_magnitude():
    cfg = sim.preset("rscp-ti")
    q = np.asarray(cfg.q_nominal)
    assert np.all(np.abs(q) > 1e5) and np.all(np.abs(q) < 1e7)


def test_rscp_duty_gain_is_inverse_heat_capacity():
    cfg = sim.preset("rscp-ti")
    rng = np.random.default_rng(5)
    s = np.array(cfg.x_fixed) + rng.normal(0, [0.01] * 2 + [2.0] + [0.01] * 2 + [2.0] + [0.01] * 2 + [2.0])
    q0 = np.asarray(cfg.q_nominal)
    h = 1000.0
    for i, vol in enumerate(cfg.volumes):
        dq = np.zeros(3)
        dq[i] = h
        diff = sim.rscp_deriv(cfg, s, q0 + dq, 0.0) - sim.rscp_deriv(cfg, s, q0, 0.0)
        expect = h / (cfg.rho * cfg.cp * vol)
        assert diff[3 * i + 2] == pytest.approx(expect, rel=1e-9)
    # vessel 1 explicitly: 1/4200 K h / kJ
    assert 1.0 / (cfg.rho * cfg.cp * cfg.volumes[0]) == pytest.approx(1 / 4200)


def test_rscp_duty_additivity_exact_structure():
    cfg = sim.preset("rscp-ti")
    rng = np.random.default_rng(7)
    s = np.array(cfg.x_fixed)
    qa = np.asarray(cfg.q_nominal) + rng.uniform(-1e6, 1e6, 3)
    qb = np.asarray(cfg.q_nominal) + rng.uniform(-1e6, 1e6, 3)
    diff = sim.rscp_deriv(cfg, s, qa, 0.0) - sim.rscp_deriv(cfg, s, qb, 0.0)
    assert np.allclose(diff[[0, 1, 3, 4, 6, 7]], 0.0, atol=1e-12)
    expect = (qa - qb) / (cfg.rho * cfg.cp * np.asarray(cfg.volumes))
    assert np.allclose(diff[[2, 5, 8]], expect, rtol=1e-9)


def test_rscp_pure_a_recycle():
    cfg = sim.preset("rscp-ti")
    xar, xbr, xcr = sim._recycle_composition(cfg, 1.0, 0.0)
    assert xar == pytest.approx(1.0, abs=1e-15)
    assert xbr == 0.0 and xcr == 0.0


def test_rscp_recycle_sums_to_one():
    cfg = sim.preset("rscp-ti")
    rng = np.random.default_rng(11)
    for _ in range(100):
        xa = rng.uniform(0, 1)
        xb = rng.uniform(0, 1 - xa)
        parts = sim._recycle_composition(cfg, xa, xb)
        assert abs(sum(parts) - 1.0) <= 1e-12


def test_rscp_degenerate_composition_raises():
    cfg = sim.preset("rscp-ti")
    bad = np.array(cfg.x_fixed)
    bad[6], bad[7] = -2.0, 0.1  # equilibrium denominator goes negative
    with pytest.raises(sim.InvalidStateError):
        sim.rscp_deriv(cfg, bad, cfg.q_nominal, 0.0)


def test_rscp_tv_matches_ti_at_time_zero():
    tv = sim.preset("rscp-tv")
    ti = sim.preset("rscp-ti")
    rng = np.random.default_rng(13)
    s = np.array(ti.x_fixed) + rng.normal(0, 0.01, 9)
    q = np.asarray(ti.q_nominal) * 1.1
    assert np.array_equal(sim.rscp_deriv(tv, s, q, 0.0), sim.rscp_deriv(ti, s, q, 0.0))
    # and decays kinetics later
    d_late = sim.rscp_deriv(tv, s, q, 10.0)
    assert not np.allclose(d_late, sim.rscp_deriv(ti, s, q, 10.0))


def test_step_euler_fixed_point_stays():
    cfg = sim.preset("rscp-ti")
    s0 = np.array(cfg.x_fixed)
    s1, t1 = sim.step_euler(cfg, s0, np.asarray(cfg.q_nominal), 0.0)
    assert t1 == cfg.dt
    assert np.max(np.abs(s1 - s0)) <= 1e-10


def test_step_euler_cartpole_derived_value():
    cfg = sim.preset("cartpole-ti")
    s1, _ = sim.step_euler(cfg, np.zeros(4), np.array([20.0]), 0.0)
    assert np.allclose(s1, [0.0, 0.39024, 0.0, -0.58536], atol=2e-5)


def test_step_euler_from_published_point_moves_little():
    cfg = sim.preset("rscp-ti")
    s0 = np.asarray(cfg.x_set)
    s1, _ = sim.step_euler(cfg, s0, np.asarray(cfg.q_nominal), 0.0)
    # 18-second step times the per-second residual bound
    assert np.max(np.abs(s1 - s0)) <= 18.0 * 4e-3


def test_termination_rules():
    cp = sim.preset("cartpole-ti")
    assert sim.check_termination(cp, np.array([0, 0, 0.35, 0]), 10) == "angle"
    assert sim.check_termination(cp, np.array([10.5, 0, 0, 0]), 10) == "position"
    assert sim.check_termination(cp, np.zeros(4), 20_040) == "horizon"
    assert sim.check_termination(cp, np.zeros(4), 1_000, mode="test") == "horizon"
    assert sim.check_termination(cp, np.zeros(4), 10) is None

    rs = sim.preset("rscp-ti")
    ok = np.array(rs.x_fixed)
    assert sim.check_termination(rs, ok, 10) is None
    bad = ok.copy()
    bad[0] = 1.2
    assert sim.check_termination(rs, bad, 10) == "composition"
    hot = ok.copy()
    hot[2] = 710.0
    assert sim.check_termination(rs, hot, 10) == "temperature"


def test_preset_overrides_and_unknown():
    cfg = sim.preset("cartpole-ti", dt=0.01)
    assert cfg.dt == 0.01
    with pytest.raises(KeyError):
        sim.preset("pendulum")


def test_neutral_control_is_box_center():
    cp = sim.preset("cartpole-ti")
    assert np.allclose(sim.neutral_control(cp), [0.0])
    rs = sim.preset("rscp-ti")
    assert np.allclose(sim.neutral_control(rs), rs.q_nominal)
