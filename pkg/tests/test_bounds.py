import math

import numpy as np
import pytest

from esorqp.bounds import (DisturbanceBoundSpec, NonConvergent, NotHurwitz, assemble_error_bounds,
                           bounds_rows, channel_bounds, continuous_bandwidth, gamma, p_sum,
                           p_sum_closed_form, p_value, phi_bound, transfer_l1)
from esorqp.observer import continuous_gains, discrete_gains, omega_to_discrete
from esorqp.plants import AccPlant, SegwayPlant

ACC_RATE = 0.2 * 9.81 * 2 * math.pi / 10


def test_p_value_examples():
    assert p_value(1, 3, 0.4) == 1.0
    assert p_value(4, 3, 0.4) == 1.0
    assert p_value(5, 0, 0.5) == pytest.approx(0.0625, abs=1e-15)
    assert p_value(9, 2, 0.0) == 0.0


def test_p_value_preconditions():
    with pytest.raises(ValueError):
        p_value(0, 1, 0.5)
    with pytest.raises(ValueError):
        p_value(3, 1, 1.0)


def test_p_value_is_binomial_tail():
    # p(k) is the chance of at most r successes in k − 1 trials
    r, omega = 2, 0.7
    for k in range(r + 2, 30):
        expected = sum(math.comb(k - 1, j) * (1 - omega) ** j * omega ** (k - 1 - j)
                       for j in range(r + 1))
        assert p_value(k, r, omega) == pytest.approx(expected, rel=1e-12)


def test_p_value_continuous_in_pole():
    for k in (3, 10, 40):
        values = [p_value(k, 1, w) for w in np.linspace(0.5, 0.5 + 1e-7, 5)]
        assert max(values) - min(values) < 1e-5


def test_p_sum_first_order_closed_form():
    for omega in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99]:
        assert p_sum(0, omega) == pytest.approx(1 / (1 - omega), abs=1e-9)


def test_p_sum_deadbeat():
    for r in range(4):
        assert p_sum(r, 0.0) == r + 1


def test_p_sum_second_order_oracle():
    omega = 0.5
    expected = 2 + omega ** 2 / (1 - omega) + (1 - omega) * (1 / (1 - omega) ** 2 - 1)
    assert p_sum(1, omega) == pytest.approx(expected, abs=1e-9)


def test_p_sum_matches_closed_form():
    for r in range(1, 4):
        for omega in (0.3, 0.9, 0.998):
            assert p_sum(r, omega) == pytest.approx(p_sum_closed_form(r, omega), rel=1e-9)


def test_p_sum_increases_with_pole():
    values = [p_sum(2, w) for w in np.linspace(0.0, 0.95, 20)]
    assert all(b > a for a, b in zip(values, values[1:]))


def test_p_sum_rejects_unit_pole():
    with pytest.raises(NonConvergent):
        p_sum(1, 1.0)


def test_gamma_zero_rate():
    assert gamma(1, 0.9, 1e-4, 0.0) == 0.0


def test_gamma_linear_in_sample_time():
    omega = omega_to_discrete(20.0, 1e-4)
    for t in (1e-3, 1e-4, 1e-5):
        assert gamma(1, omega, 2 * t, ACC_RATE) == 2 * gamma(1, omega, t, ACC_RATE)


def test_gamma_acc_speed_channel():
    omega = omega_to_discrete(20.0, 1e-4)
    value = gamma(1, omega, 1e-4, ACC_RATE)
    assert value == pytest.approx(2 / (1 - math.exp(-0.002)) * ACC_RATE * 1e-4, rel=1e-9)
    assert value == pytest.approx(0.1234, abs=1e-4)


def test_gamma_rejects_negative_rate():
    with pytest.raises(ValueError):
        gamma(1, 0.5, 1e-4, -1.0)


def test_continuous_bandwidth_inverts_discretisation():
    assert continuous_bandwidth(omega_to_discrete(20.0, 1e-4), 1e-4) == pytest.approx(20.0)


def test_transfer_l1_first_order():
    for omega in (1.0, 20.0, 100.0):
        norms = transfer_l1([[-omega]], [1.0])
        assert norms.g[0] == pytest.approx(1 / omega, abs=1e-6)


def test_transfer_l1_feedthrough():
    for omega in (1.0, 20.0):
        assert transfer_l1([[-omega]], [1.0]).h[0] == pytest.approx(2.0, abs=1e-5)


def test_transfer_l1_zero_input():
    norms = transfer_l1([[-1.0, 0.0], [0.0, -2.0]], [0.0, 0.0])
    assert norms.g.tolist() == [0.0, 0.0]
    assert norms.h.tolist() == [0.0, 0.0]


def test_transfer_l1_second_order():
    # G(s)B₀ of a critically damped pair: x₁(t) = t e^{−ωt}, x₂ = (1 − ωt) e^{−ωt}
    omega = 10.0
    norms = transfer_l1([[0.0, 1.0], [-omega ** 2, -2 * omega]], [0.0, 1.0])
    assert norms.g[0] == pytest.approx(1 / omega ** 2, rel=1e-5)
    assert norms.g[1] == pytest.approx(2 / (math.e * omega), rel=1e-5)


def test_transfer_l1_not_hurwitz():
    with pytest.raises(NotHurwitz):
        transfer_l1([[0.5]], [1.0])
    try:
        transfer_l1([[1.0, 0.0], [0.0, -1.0]], [1.0, 0.0])
        assert False
    except NotHurwitz as e:
        assert "Hurwitz" in e.message


def test_phi_bound_constant():
    result = phi_bound(lambda x, u: np.zeros_like(x), [(-1, 1)], [(-1, 1)], 3.0)
    assert result.value == 3.0
    assert result.grid == 11


def test_phi_bound_linear_corner():
    assert phi_bound(lambda x, u: -x + u, [(-2, 2)], [(-1, 1)], 0.0, 2).value == 3.0


def test_phi_bound_acc_grid_refinement():
    plant = AccPlant()
    box = list(zip(*plant.input_box))
    coarse = phi_bound(plant.field, plant.state_box, box, 0.0, 11)
    fine = phi_bound(plant.field, plant.state_box, box, 0.0, 101)
    assert abs(fine.value - coarse.value) <= 0.01 * fine.value
    p = plant.params
    drag = p.f0 + 30 * p.f1 + 900 * p.f2
    limit = p.input_fraction * p.mass * p.gravity
    assert coarse.value == pytest.approx(math.hypot((drag + limit) / p.mass, 30.0), rel=1e-12)


def test_channel_bounds_known_channel_is_zero():
    plant = AccPlant()
    bounds = channel_bounds(plant.channels[1], None, DisturbanceBoundSpec(4.0, 14.0), 1e-4)
    assert bounds.gamma == 0.0
    assert bounds.state.tolist() == [0.0]


def test_channel_bounds_first_order():
    plant = AccPlant()
    gains = continuous_gains(1, 20.0)
    bounds = channel_bounds(plant.channels[0], gains, DisturbanceBoundSpec(ACC_RATE, 1.962), 1e-4)
    assert bounds.gamma == pytest.approx(gamma(1, omega_to_discrete(20.0, 1e-4), 1e-4, ACC_RATE))
    # x − x̂ = f̃ / (s + 40)
    assert bounds.state[0] == pytest.approx(bounds.gamma / 40, rel=1e-5)
    assert bounds.derivative[0] == pytest.approx(2 * bounds.gamma, rel=1e-5)
    assert bounds.lcg_norm == pytest.approx(1.0, rel=1e-5)


def test_channel_bounds_discrete_gains():
    plant = SegwayPlant()
    omega = omega_to_discrete(20.0, 1e-4)
    gains = discrete_gains(2, omega, 1e-4)
    bounds = channel_bounds(plant.channels[1], gains, DisturbanceBoundSpec(1.0, 2.0), 1e-4)
    assert bounds.omega_d == omega
    assert bounds.gamma == pytest.approx(gamma(2, omega, 1e-4, 1.0))


def test_assemble_zero_rates():
    plant = AccPlant()
    gains = [continuous_gains(1, 20.0), None]
    specs = [DisturbanceBoundSpec(0.0, 1.0), DisturbanceBoundSpec(0.0, 0.0)]
    bound_set = assemble_error_bounds(plant.channels, gains, specs, 1e-4, plant.field,
                                      plant.state_box, list(zip(*plant.input_box)), 3)
    assert bound_set.gammas == [0.0, 0.0]
    assert bound_set.state_norm == 0.0
    bare = phi_bound(plant.field, plant.state_box, list(zip(*plant.input_box)), 0.0, 3).value
    assert bound_set.phi == pytest.approx(bare + 1.0)


def test_assemble_acc_monotone_in_sample_time():
    plant = AccPlant()
    gains = [continuous_gains(1, 20.0), None]
    box = list(zip(*plant.input_box))
    specs = plant.disturbance_bounds()
    small = assemble_error_bounds(plant.channels, gains, specs, 1e-4, plant.field,
                                  plant.state_box, box)
    large = assemble_error_bounds(plant.channels, gains, specs, 2e-4, plant.field,
                                  plant.state_box, box)
    assert 0 < small.channels[0].gamma < large.channels[0].gamma
    assert np.all(small.channels[0].state < large.channels[0].state)
    assert np.all(np.isfinite(small.channels[0].derivative))


def test_assemble_segway_two_channels():
    plant = SegwayPlant()
    gains = [continuous_gains(2, 20.0)] * 2
    specs = [DisturbanceBoundSpec(1.0, 2.0), DisturbanceBoundSpec(3.0, 2.0)]
    bound_set = assemble_error_bounds(plant.channels, gains, specs, 1e-4, plant.field,
                                      plant.state_box, list(zip(*plant.input_box)), 3)
    first, second = bound_set.gammas
    assert second == pytest.approx(3 * first)
    assert len(bound_set.channels[1].state) == 2
    rows = bounds_rows(bound_set, ["p", "phi"])
    assert [r["channel"] for r in rows] == ["p", "phi"]
    assert rows[1]["gamma"] == second
