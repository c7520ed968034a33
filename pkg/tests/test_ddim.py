import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerlat.ddim import ConstantEpsilon, ddim_inverse_step, ddim_step, invert, make_schedule, sample
from layerlat.errors import ContractError, NumericError, ParameterError


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("T", [1, 10, 50, 1000])
def test_schedule_invariants(kind, T):
    ab = make_schedule(T, kind).alpha_bar
    assert len(ab) == T + 1 and ab[0] == 1
    assert np.all(np.diff(ab) < 0) and np.all(ab > 0)


def test_cosine_terminal_value():
    assert make_schedule(50).alpha_bar[50] < 0.01
    with pytest.raises(ParameterError):
        make_schedule(0)


def oracle_step(z, e, a_t, a_p):
    x0 = (z - math.sqrt(1 - a_t) * e) / math.sqrt(a_t)
    return math.sqrt(a_p) * x0 + math.sqrt(1 - a_p) * e


@given(st.integers(1, 50), st.integers(0, 2**31))
def test_step_matches_scalar_formula(t, seed):
    sch = make_schedule(50)
    rng = np.random.default_rng(seed)
    z, e = rng.standard_normal((2, 3, 2, 2)).astype(np.float32)
    out = ddim_step(z, e, t, t - 1, sch)
    expect = np.vectorize(oracle_step)(z.astype(np.float64), e.astype(np.float64), sch.alpha_bar[t], sch.alpha_bar[t - 1])
    np.testing.assert_allclose(out, expect, atol=1e-6 * max(1, np.abs(expect).max()))


@given(st.integers(1, 40), st.integers(0, 2**31))
def test_step_and_inverse_are_mutual_inverses(t, seed):
    sch = make_schedule(50)
    rng = np.random.default_rng(seed)
    z, e = rng.standard_normal((2, 4, 3, 3)).astype(np.float32)
    up = ddim_inverse_step(z, e, t - 1, t, sch)
    np.testing.assert_allclose(ddim_step(up, e, t, t - 1, sch), z, atol=1e-5)


def test_zero_eps_closed_forms():
    sch = make_schedule(50)
    z = np.ones((1, 2, 2), np.float32)
    np.testing.assert_allclose(ddim_step(z, 0 * z, 30, 29, sch), math.sqrt(sch.alpha_bar[29] / sch.alpha_bar[30]) * z,
                               rtol=1e-6)
    np.testing.assert_allclose(ddim_step(z, 0 * z, 5, 0, sch), z / math.sqrt(sch.alpha_bar[5]), rtol=1e-6)


@pytest.mark.parametrize("T", [10, 50])
def test_constant_eps_round_trip(T):
    rng = np.random.default_rng(0)
    z0 = rng.uniform(-1, 1, (48, 4, 4)).astype(np.float32)
    den = ConstantEpsilon(0.1 * rng.standard_normal(z0.shape))
    sch = make_schedule(T)
    traj = invert(z0, den, sch)
    assert len(traj) == T + 1 and np.array_equal(traj[0], z0)
    np.testing.assert_allclose(sample({"x": traj[T]}, den, sch, target="x"), z0, atol=1e-4)


def test_hooks_fire_in_order_and_replay_is_exact(tiny_model):
    sch = make_schedule(8)
    z0 = np.random.default_rng(1).uniform(-1, 1, (48, 16, 16)).astype(np.float32)
    traj = invert(z0, tiny_model, sch)
    fired = []

    def replay(t_prev, latents):
        fired.append(("replay", t_prev))
        latents["x"] = traj[t_prev]

    def noop(t_prev, latents):
        fired.append(("noop", t_prev))

    out = sample({"x": traj[8]}, tiny_model, sch, hooks=[replay, noop], target="x")
    np.testing.assert_array_equal(out, z0)
    assert fired == [(name, t) for t in range(7, -1, -1) for name in ("replay", "noop")]


def test_noop_hook_is_non_invasive(tiny_model):
    sch = make_schedule(5)
    zT = np.random.default_rng(2).standard_normal((48, 16, 16)).astype(np.float32)
    a = sample({"x": zT}, tiny_model, sch, target="x")
    b = sample({"x": zT}, tiny_model, sch, hooks=[lambda t, l: None], target="x")
    np.testing.assert_array_equal(a, b)


def test_hook_shape_violation_is_contract_error():
    sch = make_schedule(3)
    den = ConstantEpsilon(np.zeros((1, 2, 2)))

    def bad(t_prev, latents):
        latents["x"] = np.zeros((1, 3, 3))

    with pytest.raises(ContractError):
        sample({"x": np.ones((1, 2, 2))}, den, sch, hooks=[bad])


def test_non_finite_latent_reports_step():
    sch = make_schedule(4)
    den = ConstantEpsilon(np.full((1, 2, 2), np.inf, np.float32))
    with pytest.raises(NumericError) as info:
        invert(np.zeros((1, 2, 2), np.float32), den, sch)
    assert info.value.step == 1
