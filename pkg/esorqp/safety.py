"""Barrier constraints and the QP safety filters built on them.

Every controller here solves

    minimise  w ‖u − k(x)‖² + p δ²
    subject to  Ψ(u) + β(h) >= 0        for each barrier (hard)
                V' + λ V <= δ           when a CLF is given (soft)
                u_lo <= u <= u_hi

and differs only in how Ψ is formed: from observer estimates with
worst-case error penalties (ESOR-QP), from the true state with the true or
zero disturbance (baselines), or from a disturbance observer on the barrier
derivative (DOB-CBF-QP).
"""
from collections import namedtuple
from enum import Enum
from itertools import product
import logging

import numpy as np

from .bounds import zero_bounds
from .numerics import QpProblem, rk4_step, solve_qp
from .utils import EsorError, as_vector, numerical_gradient

logger = logging.getLogger(__name__)


class MissingLipschitz(EsorError):
    """Exception raised when strict robustification lacks a gradient Lipschitz constant.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, name):
        super().__init__(f"Barrier {name} needs a Lipschitz constant for strict mode")


class RobustMode(Enum):
    """How the observer error bounds enter the barrier constraint.

    ``STRICT`` applies every penalty term; ``STEADY_STATE`` keeps only the
    disturbance error term weighted by the barrier gradient.
    """
    STRICT = "strict"
    STEADY_STATE = "steady_state"


BarrierSpec = namedtuple("BarrierSpec",
                         ["value", "grad", "gain", "degree", "alpha1", "alpha2",
                          "lipschitz", "lie", "lie_grad", "base", "base_grad", "name"],
                         defaults=[1.0, 1, None, None, None, None, None, None, None, "h"])
BarrierSpec.__doc__ = """A control barrier function h with its gradient.

    Fields:
        value, grad: h and ∇h as functions of the state.
        gain: γ_cbf of the linear class-K function β(s) = γ_cbf s.
        degree: relative degree, 1 or 2.
        alpha1, alpha2: gains of the high-order chain for degree 2.
        lipschitz: Lipschitz constant of the gradient of the barrier that is
            finally constrained (ψ₁ for degree 2), needed by strict mode.
        lie, lie_grad: ḣ and its gradient for degree 2; derived from the
            channel chain when omitted.
        base, base_grad: the original h of a lifted barrier.
        name: a label for logs.
"""

LyapunovSpec = namedtuple("LyapunovSpec", ["value", "grad", "rate", "slack_penalty"],
                          defaults=[5.0, 100.0])
LyapunovSpec.__doc__ = """A control Lyapunov function V, softened by a slack δ.

    The constraint is V' <= −rate·V + δ with cost slack_penalty·δ².
"""

ControlResult = namedtuple("ControlResult", ["u", "status", "slack", "psi", "h", "h_eff"])
ControlResult.__doc__ = """The output of a safety filter.

    ``status`` is ``"optimal"``, ``"clf_dropped"`` when the CLF row had to be
    removed, or ``"infeasible"`` when the saturated fallback was returned.
    ``psi`` holds Ψ at the returned input for each barrier, ``h`` the barrier
    values and ``h_eff`` the values of the constrained (lifted) barriers.
"""


class DobState(namedtuple("DobState", ["z", "gain", "margin"])):
    """First-order disturbance observer on a barrier derivative channel.

    The estimate is b̂ = z + k_b σ, where σ is the measured channel signal.
    """

    def estimate(self, sigma):
        return self.z + self.gain * sigma


def check_barrier(spec):
    """Validate the gains of a barrier specification."""
    if spec.degree not in (1, 2):
        raise ValueError(f"Barrier {spec.name} has relative degree {spec.degree}, expected 1 or 2")
    if spec.degree == 1 and not spec.gain > 0:
        raise ValueError(f"Barrier {spec.name} needs a positive gain, got {spec.gain}")
    if spec.degree == 2:
        if spec.alpha1 is None or spec.alpha2 is None or not (spec.alpha1 > 0 and spec.alpha2 > 0):
            raise ValueError(f"Barrier {spec.name} needs positive alpha1 and alpha2")
    return spec


def _chain_lie(spec, channel):
    states = list(channel.states)

    def lie(x):
        grad = np.asarray(spec.grad(x), dtype=float)
        return float(sum(grad[states[j]] * x[states[j + 1]] for j in range(len(states) - 1)))

    return lie


def hocbf_lift(spec, channel=None):
    """Lift a relative-degree-2 barrier to the degree-1 barrier ψ₁ = ḣ + α₁h.

    The lifted barrier carries α₂ as its gain, so the constraint on it reads
    ψ₁' + α₂ψ₁ >= 0.

    Parameters:
        spec: BarrierSpec
            A barrier of degree 2.
        channel: ChannelModel
            The channel whose chain defines ḣ when ``spec.lie`` is not given.

    Returns:
        A BarrierSpec of degree 1 with ``base`` holding the original h.

    Examples:
        >>> spec = BarrierSpec(lambda x: 1 - x[0] ** 2, lambda x: np.array([-2 * x[0], 0.0]),
        ...                    degree=2, alpha1=5.0, alpha2=5.0,
        ...                    lie=lambda x: -2 * x[0] * x[1],
        ...                    lie_grad=lambda x: np.array([-2 * x[1], -2 * x[0]]))
        >>> float(hocbf_lift(spec).value(np.zeros(2)))
        5.0
    """
    check_barrier(spec)
    if spec.degree != 2:
        raise ValueError(f"Barrier {spec.name} already has relative degree 1")
    lie = spec.lie
    if lie is None:
        if channel is None:
            raise ValueError(f"Barrier {spec.name} needs either its derivative or a channel")
        lie = _chain_lie(spec, channel)
    lie_grad = spec.lie_grad
    if lie_grad is None:
        def lie_grad(x):
            return numerical_gradient(lie, x)
    alpha1 = spec.alpha1

    def value(x):
        return lie(x) + alpha1 * spec.value(x)

    def grad(x):
        return np.asarray(lie_grad(x), dtype=float) + alpha1 * np.asarray(spec.grad(x), dtype=float)

    return BarrierSpec(value, grad, spec.alpha2, 1, spec.alpha1, spec.alpha2,
                       spec.lipschitz, lie, lie_grad, spec.value, spec.grad, spec.name)


def hocbf_characteristic(spec):
    """Characteristic polynomial (s + α₁)(s + α₂) of the ψ-chain with the constraint active."""
    check_barrier(spec)
    return np.polymul([1.0, spec.alpha1], [1.0, spec.alpha2])


def effective_barrier(spec):
    """Return the degree-1 barrier that is actually constrained."""
    check_barrier(spec)
    if spec.degree == 2:
        return hocbf_lift(spec)
    return spec


def barrier_value(spec, x):
    """The original h of a barrier, lifted or not."""
    return float((spec.base or spec.value)(x))


def robust_penalty(channels, grad, bounds, spec, mode):
    """The worst-case error penalty subtracted from the certainty-equivalent Ψ.

    In steady-state mode the penalty is Σ_i |∂h/∂x_top,i| γ_i. In strict mode
    it is Σ_i (‖∇h over channel i‖ + L ‖e_i‖)(‖H_i‖ + ‖L₀C₀G_i‖) γ_i + L ‖e‖ φ,
    with L the Lipschitz constant of ∇h and e the state error bounds.
    """
    mode = RobustMode(mode)
    if mode is RobustMode.STEADY_STATE:
        return float(sum(abs(grad[c.states[-1]]) * b.gamma
                         for c, b in zip(channels, bounds.channels)))
    if spec.lipschitz is None:
        raise MissingLipschitz(spec.name)
    lipschitz = spec.lipschitz
    penalty = 0.0
    for channel, b in zip(channels, bounds.channels):
        local = np.linalg.norm(grad[list(channel.states)]) + lipschitz * np.linalg.norm(b.state)
        penalty += local * (b.h_norm + b.lcg_norm) * b.gamma
    return float(penalty + lipschitz * bounds.state_norm * bounds.phi)


def psi_h_affine(plant, x_hat, f_hat, bounds, spec, mode=RobustMode.STEADY_STATE):
    """Split Ψ_h into its input-free part and its input coefficient.

    Parameters:
        plant: Plant
            Supplies the nominal drift, actuation and channels.
        x_hat: array_like
            The estimated state.
        f_hat: sequence of float
            One disturbance value per channel (estimates, or known values).
        bounds: ErrorBoundSet
        spec: BarrierSpec
            A degree-1 barrier (lift degree-2 barriers first).
        mode: RobustMode

    Returns:
        (constant, coefficient) with Ψ_h(u) = constant + coefficient · u.
    """
    if spec.degree != 1:
        raise ValueError(f"Barrier {spec.name} must be lifted to relative degree 1")
    x_hat = as_vector(x_hat, "state estimate")
    grad = as_vector(spec.grad(x_hat), "barrier gradient")
    drift = plant.drift(x_hat) + plant.inject(f_hat)
    constant = float(grad @ drift) - robust_penalty(plant.channels, grad, bounds, spec, mode)
    coefficient = grad @ plant.actuation(x_hat)
    return constant, coefficient


def psi_h(plant, x_hat, f_hat, u, bounds, spec, mode=RobustMode.STEADY_STATE):
    """Robust lower bound Ψ_h on the barrier derivative at input u."""
    constant, coefficient = psi_h_affine(plant, x_hat, f_hat, bounds, spec, mode)
    return constant + float(coefficient @ as_vector(u, "input"))


BarrierRow = namedtuple("BarrierRow", ["constant", "coefficient", "value", "gain", "h"])


def _clf_row(plant, clf, x, disturbance):
    grad = as_vector(clf.grad(x), "CLF gradient")
    constant = float(grad @ (plant.drift(x) + plant.inject(disturbance)))
    coefficient = grad @ plant.actuation(x)
    return constant + clf.rate * float(clf.value(x)), coefficient, clf.slack_penalty


def _problem(rows, nominal, weight, lo, hi, clf_row):
    m = nominal.size
    n = m + (1 if clf_row is not None else 0)
    h = np.zeros((n, n))
    h[:m, :m] = 2.0 * weight * np.eye(m)
    q = np.zeros(n)
    q[:m] = -2.0 * weight * nominal
    g = []
    w = []
    for row in rows:
        g.append(np.concatenate([row.coefficient, np.zeros(n - m)]))
        w.append(-(row.constant + row.gain * row.value))
    low = np.full(n, -np.inf)
    high = np.full(n, np.inf)
    low[:m] = lo
    high[:m] = hi
    if clf_row is not None:
        constant, coefficient, penalty = clf_row
        h[m, m] = 2.0 * penalty
        g.append(np.concatenate([-coefficient, [1.0]]))
        w.append(constant)
    return QpProblem(h, q, np.array(g) if g else None, np.array(w) if w else None, low, high)


def _margins(rows, u):
    return [row.constant + float(row.coefficient @ u) + row.gain * row.value for row in rows]


def _result(rows, u, status, slack):
    psi = tuple(row.constant + float(row.coefficient @ u) for row in rows)
    return ControlResult(u, status, slack, psi, tuple(row.h for row in rows),
                         tuple(row.value for row in rows))


def safety_filter(rows, nominal, weight=1.0, u_box=None, clf_row=None):
    """Solve the safety QP with the infeasibility fallback.

    The full problem is tried first; if it is infeasible the CLF row is
    dropped; if that is still infeasible the box corner maximising the
    smallest barrier margin is returned with status ``"infeasible"``.

    Parameters:
        rows: list of BarrierRow
        nominal: array_like
            The nominal input k(x).
        weight: float
            The input weight w.
        u_box: pair of array_like
            (low, high) input bounds, or None.
        clf_row: tuple
            (constant, coefficient, penalty) of the CLF constraint.
    """
    nominal = as_vector(nominal, "nominal input")
    m = nominal.size
    if u_box is None:
        lo, hi = np.full(m, -np.inf), np.full(m, np.inf)
    else:
        lo, hi = (np.asarray(b, dtype=float).reshape(m) for b in u_box)
    if clf_row is not None:
        solution = solve_qp(_problem(rows, nominal, weight, lo, hi, clf_row))
        if solution.optimal:
            return _result(rows, solution.x[:m], "optimal", float(solution.x[m]))
        logger.debug("Safety QP infeasible with the CLF row, dropping it")
    solution = solve_qp(_problem(rows, nominal, weight, lo, hi, None))
    if solution.optimal:
        return _result(rows, solution.x, "optimal" if clf_row is None else "clf_dropped", 0.0)
    logger.debug("Safety QP infeasible, falling back to a saturated input")
    if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
        return _result(rows, nominal, "infeasible", 0.0)
    corners = [np.array(c) for c in product(*zip(lo, hi))]
    best = max(corners, key=lambda u: min(_margins(rows, u)))
    return _result(rows, best, "infeasible", 0.0)


def esor_qp_control(plant, x_hat, f_hat, nominal, bounds, barriers, clf=None,
                    mode=RobustMode.STEADY_STATE, weight=1.0, u_box=None):
    """The observer-based robust safety filter.

    Parameters:
        plant: Plant
        x_hat: array_like
            The estimated state.
        f_hat: sequence of float
            Disturbance estimates per channel, with known values substituted
            for known channels.
        nominal: array_like
            The nominal input k(x̂).
        bounds: ErrorBoundSet
            The observer error bounds.
        barriers: list of BarrierSpec
        clf: LyapunovSpec
            Optional tracking constraint.
        mode: RobustMode
        weight: float
            The input weight w.
        u_box: pair of array_like
            Input bounds.

    Returns:
        A ControlResult.
    """
    x_hat = as_vector(x_hat, "state estimate")
    rows = []
    for spec in barriers:
        lifted = effective_barrier(spec)
        constant, coefficient = psi_h_affine(plant, x_hat, f_hat, bounds, lifted, mode)
        rows.append(BarrierRow(constant, coefficient, float(lifted.value(x_hat)), lifted.gain,
                               barrier_value(lifted, x_hat)))
    clf_row = _clf_row(plant, clf, x_hat, f_hat) if clf is not None else None
    return safety_filter(rows, nominal, weight, u_box, clf_row)


def nominal_cbf_qp_control(plant, x, disturbance, nominal, barriers, clf=None,
                           weight=1.0, u_box=None):
    """The certainty-equivalent CBF-QP on the true state.

    With the true channel disturbances this is the reference controller;
    with the unknown channels zeroed it is the nominal controller that
    ignores uncertainty.

    Examples:
        >>> from esorqp.plants import AccPlant
        >>> plant = AccPlant()
        >>> result = nominal_cbf_qp_control(plant, [20.0, 100.0], [0.0, 20.0], [0.0],
        ...                                 [plant.barrier()])
        >>> result.status, result.u.tolist()
        ('optimal', [0.0])
    """
    return esor_qp_control(plant, x, disturbance, nominal, zero_bounds(plant.channels),
                           barriers, clf, RobustMode.STEADY_STATE, weight, u_box)


def dob_signal(spec):
    """The barrier channel σ watched by the disturbance observer, with its gradient.

    σ = h for degree-1 barriers and σ = ḣ for degree-2 barriers.
    """
    if spec.degree == 2 or spec.base is not None:
        lifted = spec if spec.degree == 1 else hocbf_lift(spec)
        return lifted.lie, lifted.lie_grad
    return spec.value, spec.grad


def dob_drift(grad, x, field):
    """a_e = ∇σ(x)·field, the part of σ' computable from the state.

    ``grad`` is the gradient returned by :func:`dob_signal` and ``field`` is
    f(x) + g(x) u plus the injected known disturbances.
    """
    return float(np.asarray(grad(x), dtype=float) @ field)


def dob_margin(rate_bound, gain):
    """Worst-case steady-state error b_h / k_b of the disturbance observer."""
    if not gain > 0:
        raise ValueError(f"Disturbance observer gain must be positive, got {gain}")
    return rate_bound / gain


def dob_init(sigma, gain, margin=0.0):
    """Start the observer with a zero estimate: z = −k_b σ.

    Examples:
        >>> dob_init(2.0, 10.0).estimate(2.0)
        0.0
    """
    if not gain > 0:
        raise ValueError(f"Disturbance observer gain must be positive, got {gain}")
    return DobState(-gain * float(sigma), float(gain), float(margin))


def dob_derivative(z, sigma, a_e, gain):
    """ż = −k_b (z + k_b σ) − k_b a_e, so that b̂' = k_b (b_e − b̂)."""
    return -gain * (z + gain * sigma) - gain * a_e


def dob_update(state, sigma, a_e, dt):
    """Advance the disturbance observer by one RK4 step with σ and a_e held."""
    z = rk4_step(lambda t, z: dob_derivative(z, sigma, a_e, state.gain), [state.z], 0.0, dt)
    return state._replace(z=float(z[0]))


def dob_cbf_control(plant, x, estimates, known, nominal, barriers, clf=None,
                    weight=1.0, u_box=None, margins=None):
    """The disturbance-observer-based CBF-QP on the true state.

    Each barrier row is ∇ψ·(f + g u + d_known) + b̂ − margin + β(ψ) >= 0, where
    ψ is the constrained barrier and b̂ the observer estimate of the unknown
    disturbance effect on its derivative.

    Parameters:
        plant: Plant
        x: array_like
            The true state.
        estimates: list of float
            b̂ for each barrier.
        known: sequence of float
            Channel disturbances with unknown channels zeroed.
        nominal: array_like
        barriers: list of BarrierSpec
        clf: LyapunovSpec
            Evaluated with the known disturbances only.
        weight: float
        u_box: pair of array_like
        margins: list of float
            b_h / k_b for each barrier; zero when omitted.
    """
    x = as_vector(x, "state")
    margins = margins or [0.0] * len(barriers)
    rows = []
    for spec, b_hat, margin in zip(barriers, estimates, margins):
        lifted = effective_barrier(spec)
        grad = as_vector(lifted.grad(x), "barrier gradient")
        constant = float(grad @ (plant.drift(x) + plant.inject(known))) + b_hat - margin
        rows.append(BarrierRow(constant, grad @ plant.actuation(x), float(lifted.value(x)),
                               lifted.gain, barrier_value(lifted, x)))
    clf_row = _clf_row(plant, clf, x, known) if clf is not None else None
    return safety_filter(rows, nominal, weight, u_box, clf_row)
