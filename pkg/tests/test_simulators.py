import numpy as np
import pytest

from metassm.simulators import (SimSettings, gaussian_posterior, get_family, simulate_cdm,
                                simulate_ddm, simulate_gaussian_oracle, simulate_rdm)


def ddm(n, v=0.0, a=1.0, z=0.5, t=0.0, sv=0.0, st=0.0):
    return {"v": np.full(n, v), "a": np.full(n, a), "z": np.full(n, z), "t": np.full(n, t),
            "sv": np.full(n, sv), "st": np.full(n, st)}


def test_settings_validated():
    with pytest.raises(ValueError):
        SimSettings(dt=0.02)
    with pytest.raises(ValueError):
        SimSettings(t_max=0.5)


def test_ddm_symmetric_choice():
    out = simulate_ddm(ddm(100_000), rng=np.random.default_rng(0))
    assert abs(out.response.mean() - 0.5) < 0.005


def test_ddm_exit_probability():
    out = simulate_ddm(ddm(100_000, z=0.7), rng=np.random.default_rng(1))
    assert abs(out.response.mean() - 0.7) < 0.01


def test_ddm_mean_decision_time():
    out = simulate_ddm(ddm(100_000), rng=np.random.default_rng(2))
    assert abs(out.rt.mean() - 0.25) < 0.01


def test_ddm_determinism():
    a = simulate_ddm(ddm(1000, v=1.0, sv=0.5, st=0.2), SimSettings(seed=5))
    b = simulate_ddm(ddm(1000, v=1.0, sv=0.5, st=0.2), SimSettings(seed=5))
    assert np.array_equal(a.rt, b.rt) and np.array_equal(a.response, b.response)


def test_ddm_mirror_symmetry():
    n = 100_000
    p = simulate_ddm(ddm(n, v=0.8, z=0.3), rng=np.random.default_rng(3)).response.mean()
    q = simulate_ddm(ddm(n, v=-0.8, z=0.7), rng=np.random.default_rng(4)).response.mean()
    se = np.sqrt(2 * p * (1 - p) / n)
    assert abs(p - (1 - q)) < 4 * se


def test_ddm_dt_convergence():
    n = 100_000
    p1 = simulate_ddm(ddm(n, z=0.3), SimSettings(dt=1e-3), rng=np.random.default_rng(5)).response.mean()
    p2 = simulate_ddm(ddm(n, z=0.3), SimSettings(dt=5e-4), rng=np.random.default_rng(6)).response.mean()
    se = np.sqrt(0.3 * 0.7 / n)
    assert abs(p1 - p2) < 2 * np.sqrt(2) * se


def test_ddm_rt_floor():
    out = simulate_ddm(ddm(5000, v=1, t=0.3, st=0.2), rng=np.random.default_rng(7))
    assert np.all(out.rt >= out.ndt) and np.all(out.ndt >= 0.3)


def test_ddm_rejects_bad_z():
    with pytest.raises(ValueError):
        simulate_ddm(ddm(10, z=1.0))


def test_ddm_censoring():
    out = simulate_ddm(ddm(200, v=0.0, a=20.0), SimSettings(t_max=1.0), rng=np.random.default_rng(8))
    assert out.censored.mean() > 0.9
    assert np.allclose(out.rt[out.censored], 1.0 + out.ndt[out.censored])


def rdm(n, v=1.0, v_diff=0.0, a=1.0, t=0.0, sv=0.0, st=0.0):
    return {"v": np.full(n, v), "v_diff": np.full(n, v_diff), "a": np.full(n, a),
            "t": np.full(n, t), "sv": np.full(n, sv), "st": np.full(n, st)}


def test_rdm_exchangeable():
    out = simulate_rdm(rdm(100_000), rng=np.random.default_rng(0))
    assert abs(out.response.mean() - 0.5) < 0.005


def test_rdm_first_passage_nonnegative():
    out = simulate_rdm(rdm(5000, v_diff=0.7, t=0.2, sv=0.3, st=0.3), rng=np.random.default_rng(1))
    assert np.all(out.rt - out.ndt >= 0)


def test_cdm_uniform_angles():
    out = simulate_cdm({"v": np.zeros(20_000), "v_angle": np.zeros(20_000), "a": np.ones(20_000),
                        "t": np.zeros(20_000), "sv": np.zeros(20_000), "st": np.zeros(20_000)},
                       rng=np.random.default_rng(0))
    ang = out.response
    assert np.all((ang > -np.pi) & (ang <= np.pi))
    n = ang.size
    rbar = np.hypot(np.cos(ang).mean(), np.sin(ang).mean())
    # Rayleigh test at the 1% level
    assert n * rbar ** 2 < -np.log(0.01)


def test_cdm_rt_floor():
    n = 5000
    out = simulate_cdm({"v": np.ones(n), "v_angle": np.zeros(n), "a": np.ones(n),
                        "t": np.full(n, 0.2), "sv": np.zeros(n), "st": np.zeros(n)},
                       rng=np.random.default_rng(1))
    assert np.all(out.rt >= 0.2)


@pytest.mark.parametrize("mu", [0.0, 2.0])
def test_gaussian_oracle_mean(mu):
    out = simulate_gaussian_oracle({"mu": np.full(100_000, mu)}, rng=np.random.default_rng(0))
    assert abs(out.rt.mean() - mu) < 0.01
    assert np.all(out.response == 0)


def test_gaussian_posterior_closed_form():
    y = np.array([1.0, 2.0, 3.0])
    m, s = gaussian_posterior(y, 0.0, 1.0)
    assert m == pytest.approx(6.0 / 4.0)
    assert s == pytest.approx(0.5)


def test_family_lookup():
    assert get_family("DDM").fid == 0
    assert get_family(2).name == "cdm"
    assert get_family("gaussian").n_obs == 1
    with pytest.raises(KeyError):
        get_family("lba")
