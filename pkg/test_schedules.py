import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.diffusion.schedules import (
    AlphaSchedule, RoutingCoefficients, as_step_sequence, beta, lambda1, lambda2, make_cosine_alpha,
    make_linear_alpha, make_step_sequence, reweight,
)
from app.errors import ConfigError, SingularScheduleError


def test_linear_alpha_values():
    assert np.allclose(make_linear_alpha(4).alpha, [1.0, 0.75, 0.5, 0.25, 0.0], atol=0)
    assert list(make_linear_alpha(1).alpha) == [1.0, 0.0]
    assert make_linear_alpha(10)[3] == pytest.approx(0.7, abs=1e-15)


def test_schedule_rejects_invalid_sequences():
    with pytest.raises(ConfigError):
        AlphaSchedule(T=2, alpha=np.array([0.9, 0.5, 0.0]))
    with pytest.raises(ConfigError):
        AlphaSchedule(T=2, alpha=np.array([1.0, 0.5, 0.5]))
    with pytest.raises(ConfigError):
        AlphaSchedule(T=3, alpha=np.array([1.0, 0.5, 0.0]))
    with pytest.raises(ConfigError):
        make_linear_alpha(0)


def test_schedule_is_read_only(linear4):
    with pytest.raises(ValueError):
        linear4.alpha[1] = 0.3


def test_cosine_alpha_endpoints():
    sched = make_cosine_alpha(8)
    assert sched[0] == 1.0 and sched[8] == 0.0
    assert np.all(np.diff(sched.alpha) < 0)


def test_schedule_config_round_trip():
    custom = AlphaSchedule(T=3, alpha=np.array([1.0, 0.9, 0.4, 0.1]))
    assert np.array_equal(AlphaSchedule.from_config(custom.to_config()).alpha, custom.alpha)
    assert AlphaSchedule.from_config({"T": 6, "family": "cosine"}).family == "cosine"
    with pytest.raises(ConfigError):
        AlphaSchedule.from_config({"T": 6, "family": "sigmoid"})


def test_beta(linear4):
    assert beta(linear4, 2) == pytest.approx(0.5 / 0.75, abs=1e-15)
    assert beta(linear4, 1) == linear4[1]
    assert beta(linear4, 4) == 0.0


def test_beta_rejects_out_of_range_steps(linear4):
    for t in (0, 5):
        with pytest.raises(ConfigError):
            beta(linear4, t)


@given(st.integers(min_value=1, max_value=40))
def test_beta_product_recovers_alpha(T):
    sched = make_linear_alpha(T)
    for t in range(1, T + 1):
        prod = math.prod(beta(sched, k) for k in range(1, t + 1))
        assert abs(prod - sched[t]) <= 1e-12


def test_lambda2_examples(linear4):
    assert lambda2(linear4, 1, 2) == pytest.approx(0.5, abs=1e-15)
    assert lambda2(linear4, 3, 4) == pytest.approx(0.25, abs=1e-15)
    assert lambda2(linear4, 0, 3) == 1.0


def test_lambda2_rejects_equal_steps():
    with pytest.raises(ConfigError):
        lambda2(make_linear_alpha(4), 2, 2)


def test_lambda1_examples(linear4):
    assert lambda1(linear4, 1, 3, 0.0) == 1.0
    # uniform K=4 with alpha_s = 0.5, alpha_t = 0.25
    assert lambda1(linear4, 2, 3, 0.25) == pytest.approx(0.857142857142857, abs=1e-12)
    assert lambda1(linear4, 0, 4, 0.7) == 1.0


def test_lambda1_vectorized(linear4):
    values = lambda1(linear4, 2, 3, np.array([0.0, 0.25, 1.0]))
    assert values.shape == (3,)
    assert values[0] == 1.0
    assert values[1] == pytest.approx(lambda1(linear4, 2, 3, 0.25), abs=1e-15)


def test_lambda1_singular_denominator(linear4):
    with pytest.raises(SingularScheduleError):
        lambda1(linear4, 2, 4, 0.0)


@given(st.integers(min_value=2, max_value=20))
def test_lambda1_is_one_without_noise_mass(T):
    sched = make_linear_alpha(T)
    for t in range(1, T):
        for s in range(t):
            assert lambda1(sched, s, t, 0.0) == 1.0


@given(st.integers(min_value=3, max_value=20), st.data())
@settings(max_examples=50)
def test_lambda2_monotone_in_alpha_s(T, data):
    sched = make_linear_alpha(T)
    t = data.draw(st.integers(min_value=2, max_value=T))
    values = [lambda2(sched, s, t) for s in range(t)]
    # alpha decreases with s, so lambda2 must decrease too
    assert all(a > b for a, b in zip(values, values[1:]))


def test_routing_coefficients_validate_range():
    RoutingCoefficients(lambda1=np.array([0.0, 1.0]), lambda2=0.5)
    with pytest.raises(ConfigError):
        RoutingCoefficients(lambda1=1.2, lambda2=0.5)


def test_reweight_schemes(linear4):
    assert reweight("linear", make_linear_alpha(10), 1) == 1.0
    assert reweight("constant", linear4, 3) == 1.0
    assert reweight("original", linear4, 2) == pytest.approx(0.5, abs=1e-15)
    for t in range(1, 5):
        assert reweight("original", linear4, t) == lambda2(linear4, t - 1, t)
    with pytest.raises(ValueError):
        reweight("quadratic", linear4, 1)


def test_step_sequences():
    assert make_step_sequence(20, 10) == [20, 18, 16, 14, 12, 10, 8, 6, 4, 2, 0]
    assert make_step_sequence(4, 1) == [4, 0]
    assert make_step_sequence(3, 10) == [3, 2, 1, 0]
    assert as_step_sequence([4, 2, 0], 4) == [4, 2, 0]
    for bad in ([4, 4, 0], [3, 1, 0], [4, 2]):
        with pytest.raises(ConfigError):
            as_step_sequence(bad, 4)
