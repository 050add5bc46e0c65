"""Error bounds of the extended state observers.

The quantities computed here robustify the safety constraint:

* ``gamma``: the bound on the disturbance estimation error of a channel,
  built from the series p(k) of the sampled observer's error response;
* ``transfer_l1``: entrywise L1 norms of the impulse responses that turn a
  disturbance error bound into state and state-derivative error bounds;
* ``phi_bound``: a bound on the norm of the state derivative over a box.
"""
from collections import namedtuple
from functools import lru_cache
import logging
import math

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import binom

from .numerics import rk4_step
from .observer import continuous_gains, omega_to_discrete
from .utils import EsorError, as_matrix, as_vector

logger = logging.getLogger(__name__)

SERIES_BLOCK = 4096
SERIES_MAX_TERMS = 50_000_000
IMPULSE_BLOCK = 1024


class NonConvergent(EsorError):
    """Exception raised when the p(k) series cannot converge.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, omega_d):
        super().__init__(f"The p(k) series does not converge for ω_od = {omega_d}")


class NotHurwitz(EsorError):
    """Exception raised when an impulse response fails to decay.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, eigenvalues):
        super().__init__(f"Matrix is not Hurwitz, eigenvalues {eigenvalues}")


DisturbanceBoundSpec = namedtuple("DisturbanceBoundSpec", ["rate", "magnitude"],
                                  defaults=[0.0, 0.0])
DisturbanceBoundSpec.__doc__ = """Declared bounds on a channel disturbance.

    ``rate`` bounds |ḟ| (l_f) and ``magnitude`` bounds |f| (b_f).
"""

TransferNorms = namedtuple("TransferNorms", ["g", "h"])
PhiBound = namedtuple("PhiBound", ["value", "grid"])
ChannelBounds = namedtuple("ChannelBounds",
                           ["gamma", "state", "derivative", "g_norm", "h_norm",
                            "lcg_norm", "omega_d"])
ChannelBounds.__doc__ = """Error bounds of one channel.

    Fields:
        gamma: bound on |f − f̂|.
        state: entrywise bound on |x − x̂| for the channel states.
        derivative: entrywise bound on the error of the state derivatives.
        g_norm, h_norm, lcg_norm: Euclidean norms of the entrywise L1 norms
            of G(s)B₀, H(s)B₀ and L₀C₀G(s)B₀.
        omega_d: the discrete pole used for gamma.
"""


class ErrorBoundSet(namedtuple("ErrorBoundSet", ["channels", "phi", "grid", "sample_time"])):
    """Error bounds of every channel together with the global φ."""

    @property
    def gammas(self):
        return [c.gamma for c in self.channels]

    @property
    def state_norm(self):
        """Euclidean norm of all state error bounds."""
        return float(np.linalg.norm(np.concatenate([c.state for c in self.channels])))


def _check_pole(omega_d):
    if not omega_d >= 0:
        raise ValueError(f"Discrete observer pole must be non-negative, got {omega_d}")


def _p_block(ks, r, omega_d):
    i = np.arange(1, r + 2)
    ks = np.asarray(ks, dtype=float)[:, None]
    terms = binom(ks - 1, i - 1) * (1 - omega_d) ** (i - 1) * omega_d ** (ks - i)
    return terms.sum(axis=1)


def p_value(k, r, omega_d):
    """The k-th coefficient of the observer's disturbance error response.

    p(k) = 1 for 1 <= k <= r+1, and otherwise
    Σ_{i=1}^{r+1} C(k−1, i−1) (1 − ω_od)^(i−1) ω_od^(k−i).

    Examples:
        >>> p_value(1, 3, 0.4)
        1.0
        >>> p_value(5, 0, 0.5)
        0.0625
    """
    if k < 1:
        raise ValueError(f"Step index must be at least 1, got {k}")
    _check_pole(omega_d)
    if not omega_d < 1:
        raise ValueError(f"Discrete observer pole must be below 1, got {omega_d}")
    if k <= r + 1:
        return 1.0
    return float(_p_block([k], r, omega_d)[0])


@lru_cache(maxsize=256)
def p_sum(r, omega_d, tol=1e-12):
    """Sum of p(k) over k >= 1.

    Terms are summed in blocks until the geometric envelope of the last term,
    p(k) ρ / (1 − ρ) with ρ = p(k)/p(k−1), falls below ``tol``.

    Exceptions:
        NonConvergent: If ω_od >= 1.

    Examples:
        >>> p_sum(2, 0.0)
        3.0
        >>> round(p_sum(0, 0.5), 12)
        2.0
    """
    _check_pole(omega_d)
    if omega_d >= 1:
        raise NonConvergent(omega_d)
    parts = [float(r + 1)]
    start = r + 2
    while True:
        values = _p_block(np.arange(start, start + SERIES_BLOCK), r, omega_d)
        parts.append(math.fsum(values))
        last, previous = values[-1], values[-2]
        if last == 0.0:
            break
        ratio = last / previous
        if ratio < 1 and last * ratio / (1 - ratio) < tol:
            break
        start += SERIES_BLOCK
        if start > SERIES_MAX_TERMS:
            raise NonConvergent(omega_d)
    return math.fsum(parts)


def p_sum_closed_form(r, omega_d):
    """(r + 1) / (1 − ω_od).

    p(k) is the probability that at most r successes occur in k − 1
    Bernoulli trials of success probability 1 − ω_od, so summing over k
    counts the expected waiting time for the (r+1)-th success.
    """
    return (r + 1) / (1 - omega_d)


def gamma(r, omega_d, sample_time, rate):
    """Disturbance estimation error bound p_sum(r, ω_od) · l_f · T.

    Examples:
        >>> gamma(1, 0.5, 1e-3, 0.0)
        0.0
    """
    if rate < 0:
        raise ValueError(f"Disturbance rate bound must be non-negative, got {rate}")
    if not sample_time > 0:
        raise ValueError(f"Sample time must be positive, got {sample_time}")
    return p_sum(r, omega_d) * rate * sample_time


def continuous_bandwidth(omega_d, sample_time):
    """Inverse of :func:`esorqp.observer.omega_to_discrete`."""
    if not 0 < omega_d < 1:
        raise ValueError(f"Discrete pole must lie in (0, 1), got {omega_d}")
    return -math.log(omega_d) / sample_time


def transfer_l1(a_cl, b, tol=1e-10):
    """Entrywise L1 norms of the impulse responses of G(s)b and H(s)b.

    G(s) = (sI − A_cl)^-1 and H(s) = A_cl G(s) + I. The impulse response
    x(t) = e^(A_cl t) b is propagated with the RK4 step matrix until it has
    decayed below ``tol`` relative to ‖b‖ and five slowest time constants
    have passed; the feedthrough of H contributes |b_i| to entry i.

    Parameters:
        a_cl: array_like
            A Hurwitz matrix.
        b: array_like
            The input column.
        tol: float
            Relative decay threshold.

    Returns:
        TransferNorms(g, h), each an array of per-entry L1 norms.

    Exceptions:
        NotHurwitz: If the response cannot decay.

    Examples:
        >>> round(float(transfer_l1([[-20.0]], [1.0]).g[0]), 6)
        0.05
    """
    a = as_matrix(a_cl, "closed-loop matrix")
    b = as_vector(b, "input column")
    n = b.size
    if not np.any(b):
        return TransferNorms(np.zeros(n), np.zeros(n))
    eigenvalues = np.linalg.eigvals(a)
    if np.any(eigenvalues.real >= 0):
        raise NotHurwitz(eigenvalues)
    slowest = 1.0 / np.min(-eigenvalues.real)
    dt = min(1e-4, 0.01 / np.max(np.abs(eigenvalues)))
    step = rk4_step(lambda t, x: a @ x, np.eye(n), 0.0, dt)
    powers = [np.eye(n)]
    for _ in range(IMPULSE_BLOCK):
        powers.append(powers[-1] @ step)
    powers = np.array(powers)
    g = np.zeros(n)
    h = np.zeros(n)
    x = b.copy()
    t = 0.0
    while True:
        trajectory = np.einsum("kij,j->ki", powers, x)
        g += trapezoid(np.abs(trajectory), dx=dt, axis=0)
        h += trapezoid(np.abs(trajectory @ a.T), dx=dt, axis=0)
        x = trajectory[-1]
        t += IMPULSE_BLOCK * dt
        if np.linalg.norm(x) < tol * np.linalg.norm(b) and t > 5 * slowest:
            break
        if t > 200 * slowest:
            raise NotHurwitz(eigenvalues)
    return TransferNorms(g, h + np.abs(b))


def phi_bound(field, state_box, input_box, magnitude, grid_n=11):
    """Bound the state derivative norm over a box of states and inputs.

    φ = max ‖f(x) + g(x)u‖ over a grid of ``grid_n`` points per dimension
    (corners included) plus the disturbance magnitude bound.

    Parameters:
        field: callable
            ``field(x, u)`` with x of shape (n, N) and u of shape (m, N),
            returning the nominal derivatives of shape (n, N).
        state_box: list of (low, high) pairs
        input_box: list of (low, high) pairs
        magnitude: float
            Norm of the disturbance magnitude bounds.
        grid_n: int
            Points per dimension, at least 2.

    Examples:
        >>> phi_bound(lambda x, u: -x + u, [(-2, 2)], [(-1, 1)], 0.0, 5)
        PhiBound(value=3.0, grid=5)
    """
    if grid_n < 2:
        raise ValueError(f"Grid needs at least 2 points per dimension, got {grid_n}")
    n = len(state_box)
    axes = [np.linspace(lo, hi, grid_n) for lo, hi in list(state_box) + list(input_box)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh])
    values = np.asarray(field(points[:n], points[n:]), dtype=float)
    value = float(np.max(np.sqrt(np.sum(values ** 2, axis=0))) + magnitude)
    return PhiBound(value, grid_n)


def zero_channel_bounds(order):
    """Bounds of a channel whose disturbance is known exactly."""
    zeros = np.zeros(order)
    return ChannelBounds(0.0, zeros, zeros, 0.0, 0.0, 0.0, 0.0)


def channel_bounds(channel, gains, spec, sample_time, omega_d=None):
    """Error bounds of one channel.

    Parameters:
        channel: ChannelModel
        gains: EsoGains
            The observer gains of the channel.
        spec: DisturbanceBoundSpec
        sample_time: float
            The sample time T of the disturbance error bound.
        omega_d: float
            Overrides the discrete pole used for gamma; by default
            e^(−ω_o T) for continuous gains and ω_od for discrete gains.
    """
    r = channel.order
    if channel.known:
        return zero_channel_bounds(r)
    if gains.mode == "continuous":
        l_full = gains.gains
        pole = omega_to_discrete(gains.bandwidth, sample_time) if omega_d is None else omega_d
    else:
        pole = gains.bandwidth if omega_d is None else omega_d
        l_full = continuous_gains(r, continuous_bandwidth(gains.bandwidth, gains.sample_time)).gains
    g_value = gamma(r, pole, sample_time, spec.rate)
    l0 = l_full[:r]
    a_cl = np.eye(r, k=1) - np.outer(l0, np.eye(r)[0])
    norms = transfer_l1(a_cl, np.eye(r)[r - 1])
    lcg = np.abs(l0) * norms.g[0]
    return ChannelBounds(g_value, norms.g * g_value, norms.h * g_value,
                         float(np.linalg.norm(norms.g)), float(np.linalg.norm(norms.h)),
                         float(np.linalg.norm(lcg)), pole)


def assemble_error_bounds(channels, gains, specs, sample_time, field,
                          state_box, input_box, grid_n=11, omega_d=None):
    """Assemble the error bounds of every channel and the global φ.

    Parameters:
        channels: list of ChannelModel
        gains: list of EsoGains, None for known channels
        specs: list of DisturbanceBoundSpec, one per channel
        sample_time: float
            T of the disturbance error bounds.
        field: callable
            Vectorised nominal dynamics ``field(x, u)`` for φ.
        state_box, input_box: lists of (low, high) pairs
        grid_n: int
            Grid points per dimension for φ.
        omega_d: float
            Optional discrete pole override shared by every channel.

    Returns:
        An ErrorBoundSet.
    """
    bounds = tuple(channel_bounds(c, g, s, sample_time, omega_d)
                   for c, g, s in zip(channels, gains, specs))
    magnitude = float(np.linalg.norm([s.magnitude for s in specs]))
    phi = phi_bound(field, state_box, input_box, magnitude, grid_n)
    logger.info("Error bounds: gamma=%s phi=%.6g (grid %d)",
                [round(b.gamma, 9) for b in bounds], phi.value, phi.grid)
    return ErrorBoundSet(bounds, phi.value, phi.grid, sample_time)


def zero_bounds(channels):
    """An ErrorBoundSet with every entry zero."""
    return ErrorBoundSet(tuple(zero_channel_bounds(c.order) for c in channels), 0.0, 0, 0.0)


def bounds_rows(bound_set, names=None):
    """Flatten a bound set into CSV rows, one per channel."""
    rows = []
    for i, b in enumerate(bound_set.channels):
        row = {"channel": names[i] if names else str(i + 1),
               "gamma": b.gamma,
               "omega_d": b.omega_d,
               "g_norm": b.g_norm,
               "h_norm": b.h_norm,
               "lcg_norm": b.lcg_norm,
               "phi": bound_set.phi,
               "grid": bound_set.grid}
        for j, value in enumerate(b.state):
            row[f"state_{j}"] = float(value)
        for j, value in enumerate(b.derivative):
            row[f"derivative_{j}"] = float(value)
        rows.append(row)
    return rows
