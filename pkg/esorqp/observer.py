"""Extended state observers for single-output normal-form channels.

A channel of relative degree r is the integrator chain

    x_1' = x_2, ..., x_r' = b(x) + a(x) u + f

whose total disturbance f is appended as an extended state. The observer
estimates (x_1, ..., x_r, f) from the measured x_1, either in continuous
time or as an Euler-discretised sampled observer.
"""
from collections import namedtuple
from math import comb, exp
import logging

import numpy as np

from .numerics import SingularMatrix, linear_solve, rk4_step
from .utils import EsorError, as_vector

logger = logging.getLogger(__name__)

GAIN_TOLERANCE = 1e-9


class ObservabilityLoss(EsorError):
    """Exception raised when the observability matrix cannot be inverted.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, order):
        super().__init__(f"Observability matrix of the order-{order} chain is singular")


class DegenerateGain(EsorError):
    """Exception raised when an actuated channel loses its input gain.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, name, value):
        super().__init__(f"Input gain of channel {name} is {value:.3e}, below {GAIN_TOLERANCE}")


ChannelModel = namedtuple("ChannelModel",
                          ["order", "gain", "drift", "states", "output",
                           "control", "dimension", "actuated", "known", "name"],
                          defaults=[0, None, True, False, "channel"])
ChannelModel.__doc__ = """One normal-form channel of a plant.

    Fields:
        order: relative degree r of the channel.
        gain: a(x), the input gain, as a function of the full plant state.
        drift: b(x), the known drift, as a function of the full plant state.
        states: indices of (x_1, ..., x_r) in the plant state vector.
        output: index of x_1 in the measurement vector.
        control: index of the input component driving the channel.
        dimension: size of the plant state vector.
        actuated: whether a(x) must stay away from zero.
        known: the disturbance is a known signal and is not estimated.
        name: a label used in logs and column names.
"""

EsoGains = namedtuple("EsoGains", ["gains", "mode", "bandwidth", "sample_time"],
                      defaults=[None])
EsoGains.__doc__ = """Observer gain vector L with its placement.

    ``bandwidth`` is ω_o in rad/s for continuous gains and ω_od for discrete
    gains; ``sample_time`` is only set for discrete gains.
"""

AugmentedSystem = namedtuple("AugmentedSystem", ["A", "B", "C", "D"])


class EsoState(namedtuple("EsoState", ["estimate", "time"])):
    """Augmented estimate (x̂_1, ..., x̂_r, f̂) at a time stamp."""

    @property
    def x_hat(self):
        return self.estimate[:-1]

    @property
    def f_hat(self):
        return float(self.estimate[-1])


def _check_order(r):
    if int(r) != r or r < 1:
        raise ValueError(f"Relative degree must be a positive integer, got {r}")
    return int(r)


def augmented_system(r, mode="continuous", sample_time=None):
    """Build the matrices of the chain augmented with its extended state.

    Parameters:
        r: int
            The relative degree.
        mode: str
            ``"continuous"`` or ``"discrete"``; the discrete matrices are the
            Euler discretisation with step ``sample_time``.
        sample_time: float
            The sample time T for discrete mode.

    Returns:
        An AugmentedSystem (A, B, C, D) with B the input column, C the output
        row and D the column through which the disturbance motion enters.

    Examples:
        >>> augmented_system(1).A.tolist()
        [[0.0, 1.0], [0.0, 0.0]]
    """
    r = _check_order(r)
    n = r + 1
    shift = np.eye(n, k=1)
    b = np.zeros(n)
    b[r - 1] = 1.0
    c = np.zeros(n)
    c[0] = 1.0
    d = np.zeros(n)
    d[r] = 1.0
    if mode == "continuous":
        return AugmentedSystem(shift, b, c, d)
    if mode == "discrete":
        if sample_time is None or not sample_time > 0:
            raise ValueError(f"Discrete mode needs a positive sample time, got {sample_time}")
        return AugmentedSystem(np.eye(n) + sample_time * shift, sample_time * b, c, d)
    raise ValueError(f"Unknown observer mode: {mode}")


def characteristic_polynomial(matrix):
    """Coefficients of det(sI − M), highest power first."""
    return np.real(np.poly(np.asarray(matrix, dtype=float)))


def observability_matrix(a, c):
    """Stack C, CA, ..., CA^(n−1)."""
    a = np.asarray(a, dtype=float)
    rows = [np.asarray(c, dtype=float)]
    for _ in range(a.shape[0] - 1):
        rows.append(rows[-1] @ a)
    return np.vstack(rows)


def error_matrix(gains):
    """Return A − LC, the observer error dynamics matrix for the given gains."""
    r = len(gains.gains) - 1
    system = augmented_system(r, gains.mode, gains.sample_time)
    return system.A - np.outer(gains.gains, system.C)


def continuous_gains(r, omega):
    """Observer gains placing every eigenvalue of A − LC at −ω_o.

    L_j = C(r+1, j) ω_o^j, the coefficients of (s + ω_o)^(r+1).

    Parameters:
        r: int
            The relative degree.
        omega: float
            The observer bandwidth ω_o in rad/s.

    Examples:
        >>> continuous_gains(1, 20.0).gains.tolist()
        [40.0, 400.0]
        >>> continuous_gains(2, 10.0).gains.tolist()
        [30.0, 300.0, 1000.0]
    """
    r = _check_order(r)
    if not omega > 0:
        raise ValueError(f"Observer bandwidth must be positive, got {omega}")
    gains = np.array([comb(r + 1, j) * omega ** j for j in range(1, r + 2)], dtype=float)
    return EsoGains(gains, "continuous", float(omega))


def discrete_gains(r, omega_d, sample_time=1.0):
    """Observer gains placing every eigenvalue of the discrete A − LC at ω_od.

    Ackermann's formula is applied to the unit-step chain, whose
    observability matrix is triangular with unit diagonal, and the result is
    rescaled to the sample time T (the chain at step T is the unit chain in
    coordinates scaled by powers of T).

    Parameters:
        r: int
            The relative degree.
        omega_d: float
            The discrete pole ω_od, in [0, 1).
        sample_time: float
            The sample time T.

    Exceptions:
        ObservabilityLoss: If the observability matrix is singular.

    Examples:
        >>> [round(float(g), 12) for g in discrete_gains(1, 0.5).gains]
        [1.0, 0.25]
    """
    r = _check_order(r)
    if not 0 <= omega_d < 1:
        raise ValueError(f"Discrete observer pole must lie in [0, 1), got {omega_d}")
    if not sample_time > 0:
        raise ValueError(f"Sample time must be positive, got {sample_time}")
    unit = augmented_system(r, "discrete", 1.0)
    n = r + 1
    target = np.poly(np.full(n, float(omega_d)))
    poly_of_a = np.zeros((n, n))
    for coeff in target:
        poly_of_a = poly_of_a @ unit.A + coeff * np.eye(n)
    last = np.zeros(n)
    last[-1] = 1.0
    try:
        column = linear_solve(observability_matrix(unit.A, unit.C), last)
    except SingularMatrix:
        raise ObservabilityLoss(r)
    gains = (poly_of_a @ column) / sample_time ** np.arange(n)
    return EsoGains(gains, "discrete", float(omega_d), float(sample_time))


def omega_to_discrete(omega, sample_time):
    """Map a continuous bandwidth to a discrete pole through z = e^(sT).

    Examples:
        >>> round(omega_to_discrete(20.0, 1e-4), 12)
        0.998001998667
    """
    if not omega > 0:
        raise ValueError(f"Observer bandwidth must be positive, got {omega}")
    if not sample_time > 0:
        raise ValueError(f"Sample time must be positive, got {sample_time}")
    return exp(-omega * sample_time)


def _evaluate(channel, point):
    a = float(channel.gain(point))
    b = float(channel.drift(point))
    if channel.actuated and abs(a) < GAIN_TOLERANCE:
        raise DegenerateGain(channel.name, a)
    return a, b


def _local_point(channel, estimate):
    point = np.zeros(channel.dimension or (max(channel.states) + 1))
    point[list(channel.states)] = estimate[:-1]
    return point


def operating_point(channels, estimates, measurement):
    """Assemble the plant state at which a(·) and b(·) are evaluated.

    Every observed channel contributes its estimate x̂, including x̂_1 in
    place of the measured output. Known channels, which run no observer,
    contribute their measured output.

    Parameters:
        channels: list of ChannelModel
        estimates: list of arrays of length r+1, or None for known channels
        measurement: the measurement vector
    """
    dimension = channels[0].dimension or max(max(c.states) for c in channels) + 1
    point = np.zeros(dimension)
    for channel, estimate in zip(channels, estimates):
        if estimate is not None:
            point[list(channel.states)] = estimate[:-1]
        else:
            point[channel.states[0]] = measurement[channel.output]
    return point


def initial_state(channel, y, t=0.0):
    """x̂_1 = y, every other estimate zero, f̂ = 0."""
    estimate = np.zeros(channel.order + 1)
    estimate[0] = y
    return EsoState(estimate, float(t))


def eso_derivative(estimate, y, u, a, b, gains):
    """Right-hand side of the continuous observer for fixed a, b and u."""
    r = gains.size - 1
    dz = np.empty(r + 1)
    dz[:r - 1] = estimate[1:r]
    dz[r - 1] = estimate[r] + b + a * u
    dz[r] = 0.0
    return dz + gains * (y - estimate[0])


def eso_step_continuous(state, y, u, dt, channel, gains, point=None):
    """Advance the continuous observer by one RK4 step.

    The input gain and drift are evaluated once at the operating point
    (by default the channel's own estimate) and held over the step, as is
    the measurement ``y``.

    Parameters:
        state: EsoState
        y: float
            The measured output x_1.
        u: float
            The input driving the channel.
        dt: float
            The step.
        channel: ChannelModel
        gains: EsoGains
            Continuous gains.
        point: array_like
            Optional plant-state operating point.
    """
    if gains.mode != "continuous":
        raise ValueError("eso_step_continuous needs continuous gains")
    if point is None:
        point = _local_point(channel, state.estimate)
    a, b = _evaluate(channel, point)
    estimate = rk4_step(lambda t, z: eso_derivative(z, y, u, a, b, gains.gains),
                        state.estimate, state.time, dt)
    return EsoState(estimate, state.time + dt)


def eso_step_discrete(state, y, u, channel, gains, point=None):
    """One update of the sampled observer.

    x̂(k+1) = A x̂(k) + B (b + a u) + L (y(k) − C x̂(k)) with the Euler chain
    matrices at the gains' sample time.
    """
    if gains.mode != "discrete":
        raise ValueError("eso_step_discrete needs discrete gains")
    y = float(as_vector(y, "measurement")[0])
    u = float(as_vector(u, "input")[0])
    if point is None:
        point = _local_point(channel, state.estimate)
    a, b = _evaluate(channel, point)
    system = augmented_system(channel.order, "discrete", gains.sample_time)
    estimate = (system.A @ state.estimate + system.B * (b + a * u)
                + gains.gains * (y - state.estimate[0]))
    return EsoState(estimate, state.time + gains.sample_time)


class ExtendedStateObserver:
    """An observer bound to one channel, holding its current state."""

    def __init__(self, channel, gains, y0, t0=0.0):
        self.channel = channel
        self.gains = gains
        self.state = initial_state(channel, y0, t0)

    @property
    def estimate(self):
        return self.state.estimate

    @property
    def continuous(self):
        return self.gains.mode == "continuous"

    def derivative(self, estimate, y, u, point):
        """Observer right-hand side at an operating point, for joint integration."""
        a, b = _evaluate(self.channel, point)
        return eso_derivative(estimate, y, u, a, b, self.gains.gains)

    def step(self, y, u, dt=None, point=None):
        """Advance the observer with a measurement sample and held input."""
        if self.continuous:
            self.state = eso_step_continuous(self.state, y, u, dt, self.channel,
                                             self.gains, point)
        else:
            self.state = eso_step_discrete(self.state, y, u, self.channel,
                                           self.gains, point)
        return self.state
