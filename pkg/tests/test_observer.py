import math

import numpy as np
import pytest

from esorqp.bounds import gamma
from esorqp.numerics import rk4_step
from esorqp.observer import (ChannelModel, ExtendedStateObserver, augmented_system,
                             characteristic_polynomial, continuous_gains,
                             discrete_gains, error_matrix, EsoState, eso_step_continuous,
                             eso_step_discrete, initial_state, observability_matrix,
                             omega_to_discrete, operating_point, DegenerateGain)


def _integrator(order=1, gain=1.0):
    return ChannelModel(order=order, gain=lambda x: gain, drift=lambda x: 0.0,
                        states=tuple(range(order)), output=0, control=0,
                        dimension=order)


def _binomial_poly(root, n):
    return np.poly(np.full(n, root))


def test_continuous_gains_examples():
    assert continuous_gains(1, 20.0).gains.tolist() == [40.0, 400.0]
    assert continuous_gains(1, 1.0).gains.tolist() == [2.0, 1.0]
    assert continuous_gains(2, 10.0).gains.tolist() == [30.0, 300.0, 1000.0]


def test_continuous_gain_placement():
    for r in range(1, 5):
        for omega in (1.0, 5.0, 20.0):
            coeffs = characteristic_polynomial(error_matrix(continuous_gains(r, omega)))
            expected = _binomial_poly(-omega, r + 1)
            assert np.allclose(coeffs, expected, rtol=1e-9, atol=1e-9 * np.max(np.abs(expected)))


def test_discrete_gain_placement():
    for r in range(1, 5):
        for omega_d in (0.0, 0.3, 0.9, 0.998):
            coeffs = characteristic_polynomial(error_matrix(discrete_gains(r, omega_d)))
            expected = _binomial_poly(omega_d, r + 1)
            assert np.allclose(coeffs, expected, rtol=1e-9, atol=1e-9)


def test_discrete_gains_rescale_with_sample_time():
    gains = discrete_gains(2, 0.9, sample_time=0.01)
    coeffs = characteristic_polynomial(error_matrix(gains))
    assert np.allclose(coeffs, _binomial_poly(0.9, 3), atol=1e-9)
    assert gains.sample_time == 0.01


def test_discrete_gains_first_order_closed_form():
    gains = discrete_gains(1, 0.25).gains
    assert gains[0] == pytest.approx(1.5)
    assert gains[1] == pytest.approx(0.5625)


def test_preconditions():
    with pytest.raises(ValueError):
        discrete_gains(1, 1.0)
    with pytest.raises(ValueError):
        continuous_gains(0, 1.0)
    with pytest.raises(ValueError):
        omega_to_discrete(0.0, 1e-4)


def test_omega_to_discrete():
    assert omega_to_discrete(20.0, 1e-4) == pytest.approx(math.exp(-0.002), abs=1e-15)
    assert omega_to_discrete(20.0, 1e-12) == pytest.approx(1.0)


def test_augmented_system_is_observable():
    for r in range(1, 5):
        system = augmented_system(r)
        assert np.linalg.matrix_rank(observability_matrix(system.A, system.C)) == r + 1
        discrete = augmented_system(r, "discrete", 1e-3)
        assert np.allclose(discrete.A, np.eye(r + 1) + 1e-3 * system.A)


def test_exact_initialisation_stays_at_truth():
    channel = _integrator()
    gains = continuous_gains(1, 20.0)
    state = initial_state(channel, 2.0)
    for _ in range(100):
        state = eso_step_continuous(state, 2.0, 0.0, 1e-3, channel, gains)
    assert state.estimate.tolist() == [2.0, 0.0]
    assert state.time == pytest.approx(0.1)


def test_constant_disturbance_converges():
    omega = 20.0
    d = 1.5
    channel = _integrator(order=2)
    gains = continuous_gains(2, omega)
    state = initial_state(channel, 0.0)
    dt = 1e-3
    steps = int(round(10 / omega / dt))
    for k in range(steps):
        t = k * dt
        state = eso_step_continuous(state, 0.5 * d * t * t, 0.0, dt, channel, gains)
    assert abs(state.f_hat - d) <= 0.01 * d


def _sinusoid(t, amplitude=0.2 * 9.81, period=10.0):
    return amplitude * math.sin(2 * math.pi * t / period)


def test_sinusoid_error_within_gamma():
    omega = 20.0
    sample_time = 1e-4
    rate = 0.2 * 9.81 * 2 * math.pi / 10
    bound = gamma(1, omega_to_discrete(omega, sample_time), sample_time, rate)
    observer = ExtendedStateObserver(_integrator(), continuous_gains(1, omega), 0.0)

    def joint(t, z):
        y = z[0]
        return np.concatenate([[_sinusoid(t)], observer.derivative(z[1:], y, 0.0, z[:1])])

    z = np.zeros(3)
    dt = 1e-3
    worst = 0.0
    for k in range(12000):
        t = k * dt
        if t >= 1.0:
            worst = max(worst, abs(_sinusoid(t) - z[2]))
        z = rk4_step(joint, z, t, dt)
    assert worst <= bound
    assert worst >= 0.9 * bound


def test_discrete_deadbeat():
    sample_time = 0.01
    channel = _integrator()
    gains = discrete_gains(1, 0.0, sample_time)
    d = 0.7
    x = 1.0
    state = initial_state(channel, x)
    errors = []
    for _ in range(5):
        state = eso_step_discrete(state, x, 0.0, channel, gains)
        x = x + sample_time * d
        errors.append(max(abs(state.estimate[0] - x), abs(state.f_hat - d)))
    assert errors[1] < 1e-9
    assert max(errors[2:]) < 1e-9


def test_discrete_and_continuous_agree():
    omega = 20.0
    sample_time = 1e-4
    channel = _integrator()
    discrete = ExtendedStateObserver(channel, discrete_gains(1, omega_to_discrete(omega, sample_time), sample_time), 0.0)
    continuous = ExtendedStateObserver(channel, continuous_gains(1, omega), 0.0)
    amplitude = 0.2 * 9.81
    period = 10.0
    scale = 2 * math.pi / period

    def position(t):
        return amplitude * (1 - math.cos(scale * t)) / scale

    worst = 0.0
    for k in range(30000):
        t = k * sample_time
        y = position(t)
        discrete.step(y, 0.0)
        continuous.step(y, 0.0, sample_time)
        worst = max(worst, abs(discrete.state.f_hat - continuous.state.f_hat))
    assert worst <= 1e-3 * amplitude


def test_operating_point_uses_estimates():
    first = ChannelModel(1, lambda x: 1.0, lambda x: 0.0, (0,), 0, 0, 2)
    second = ChannelModel(1, lambda x: 0.0, lambda x: -x[0], (1,), 1, 0, 2, actuated=False)
    point = operating_point([first, second], [np.array([9.0, 0.1]), None], [3.0, 40.0])
    assert point.tolist() == [9.0, 40.0]


def test_drift_evaluated_at_estimate():
    channel = ChannelModel(1, lambda x: 1.0, lambda x: -x[0], (0,), 0, 0, 1)
    gains = continuous_gains(1, 5.0)
    state = EsoState(np.array([2.0, 0.0]), 0.0)
    default = eso_step_continuous(state, 5.0, 0.0, 1e-3, channel, gains)
    at_estimate = eso_step_continuous(state, 5.0, 0.0, 1e-3, channel, gains, np.array([2.0]))
    at_output = eso_step_continuous(state, 5.0, 0.0, 1e-3, channel, gains, np.array([5.0]))
    assert np.allclose(default.estimate, at_estimate.estimate)
    assert not np.allclose(default.estimate, at_output.estimate)

    discrete = discrete_gains(1, 0.9, 1e-3)
    stepped = eso_step_discrete(state, 5.0, 0.0, channel, discrete)
    expected = eso_step_discrete(state, 5.0, 0.0, channel, discrete, np.array([2.0]))
    assert np.allclose(stepped.estimate, expected.estimate)


def test_degenerate_gain():
    channel = _integrator(gain=0.0)
    with pytest.raises(DegenerateGain):
        eso_step_continuous(initial_state(channel, 0.0), 0.0, 1.0, 1e-3, channel,
                            continuous_gains(1, 5.0))
