"""Ground-truth dynamics of the case-study plants.

Each plant is written as x' = f(x) + g(x) u + d(t), where d injects one
disturbance value per normal-form channel into the top row of that
channel's integrator chain.
"""
from abc import ABC, abstractmethod
from collections import namedtuple
import logging
import math

import numpy as np

from .bounds import DisturbanceBoundSpec
from .observer import ChannelModel
from .safety import BarrierSpec, LyapunovSpec
from .utils import EsorError, as_vector

logger = logging.getLogger(__name__)


class ModelDomain(EsorError):
    """Exception raised when a state leaves the region where a model is valid.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, what, value):
        super().__init__(f"{what} = {value} is outside the model domain")


class DisturbanceSignal(namedtuple("DisturbanceSignal",
                                   ["kind", "amplitude", "period", "phase", "value"],
                                   defaults=["zero", 0.0, 1.0, 0.0, 0.0])):
    """An analytic disturbance signal of kind sinusoid, constant or zero.

    A sinusoid is amplitude·sin(2πt/period + phase).

    Examples:
        >>> round(DisturbanceSignal("sinusoid", 2.0, 10.0)(2.5), 12)
        2.0
        >>> DisturbanceSignal("constant", value=-1.5).rate_bound
        0.0
    """

    def __call__(self, t):
        if self.kind == "sinusoid":
            return self.amplitude * math.sin(2 * math.pi * t / self.period + self.phase)
        if self.kind == "constant":
            return self.value
        if self.kind == "zero":
            return 0.0
        raise ValueError(f"Unknown disturbance kind: {self.kind}")

    @property
    def rate_bound(self):
        if self.kind == "sinusoid":
            return abs(self.amplitude) * 2 * math.pi / self.period
        return 0.0

    @property
    def magnitude_bound(self):
        if self.kind == "sinusoid":
            return abs(self.amplitude)
        if self.kind == "constant":
            return abs(self.value)
        return 0.0

    def bound_spec(self):
        return DisturbanceBoundSpec(self.rate_bound, self.magnitude_bound)


class LeadProfile(namedtuple("LeadProfile", ["v0", "segments", "rate_bound"],
                             defaults=[(), 4.0])):
    """Lead-car speed: cruise at v0 with constant-acceleration segments.

    ``segments`` holds (start, end, acceleration) triples; ``rate_bound`` is
    the declared bound on the lead acceleration.

    Examples:
        >>> LeadProfile(14.0, ((1.0, 3.0, -2.0),)).speed(5.0)
        10.0
    """

    def speed(self, t):
        v = self.v0
        for start, end, acceleration in self.segments:
            v += acceleration * min(max(t - start, 0.0), end - start)
        return v

    @property
    def magnitude_bound(self):
        v = self.v0
        speeds = [abs(v)]
        for start, end, acceleration in sorted(self.segments):
            v += acceleration * (end - start)
            speeds.append(abs(v))
        return max(speeds)

    def bound_spec(self):
        observed = max((abs(a) for _, _, a in self.segments), default=0.0)
        if observed > self.rate_bound:
            raise ValueError(f"Lead acceleration {observed} exceeds the declared bound {self.rate_bound}")
        return DisturbanceBoundSpec(self.rate_bound, self.magnitude_bound)


AccParams = namedtuple("AccParams",
                       ["mass", "f0", "f1", "f2", "v_desired", "headway", "gravity",
                        "input_fraction", "lead_v0", "lead_segments", "lead_rate_bound",
                        "lead_known", "state_box"],
                       defaults=[1650.0, 0.1, 5.0, 0.25, 24.0, 1.8, 9.81, 0.3, 14.0,
                                 ((15.0, 19.0, -1.5), (22.0, 28.0, 1.0)), 4.0, True,
                                 ((0.0, 30.0), (0.0, 150.0))])
AccParams.__doc__ = """Parameters of the adaptive cruise control plant.

    Fields:
        mass: vehicle mass m in kg.
        f0, f1, f2: rolling resistance F_r(v) = f0 + f1 v + f2 v².
        v_desired: the cruise speed v_d tracked by the CLF.
        headway: τ_d in the barrier h = D − τ_d v_f.
        gravity: g in m/s².
        input_fraction: the input box is ± input_fraction · m g.
        lead_v0, lead_segments, lead_rate_bound: the lead speed profile.
        lead_known: whether the lead speed is available to the controller.
        state_box: (v_f, D) ranges for the state-derivative bound.
"""

SegwayParams = namedtuple("SegwayParams",
                          ["body_mass", "wheel_mass", "wheel_inertia", "body_inertia",
                           "com_height", "wheel_radius", "motor_gain", "motor_damping",
                           "gravity", "k_p", "k_v", "k_phi", "k_omega", "p_target",
                           "input_limit", "state_box", "rate_bounds"],
                          defaults=[44.798, 5.0, 0.1107, 3.8285, 0.2, 0.195, 6.0, 0.5,
                                    9.81, 4.0, 8.0, 40.0, 10.0, 1.0, 30.0,
                                    ((-5.0, 5.0), (-0.5605, 0.5605), (-3.0, 3.0), (-3.0, 3.0)),
                                    (3.0, 3.0)])
SegwayParams.__doc__ = """Parameters of the two-wheeled inverted pendulum.

    Fields:
        body_mass, wheel_mass: m_b and M_w in kg.
        wheel_inertia, body_inertia: I_w about the axle and I_b about the
            body centre of mass, in kg m².
        com_height: l, distance from the axle to the body centre of mass.
        wheel_radius: r in m.
        motor_gain: torque per volt.
        motor_damping: viscous friction between body and wheels, N m s.
        k_p, k_v, k_phi, k_omega: gains of the nominal law.
        p_target: the position p_d to reach.
        input_limit: the voltage box is ± input_limit.
        state_box: (p, φ, υ, ω) ranges for the state-derivative bound.
        rate_bounds: declared bounds on the rates of the lumped disturbances of
            the υ and ω channels, or None to use the rates of d1 and d2. They
            cover the model mismatch carried by each channel along with d.
"""


def drag(v, params):
    """Rolling resistance F_r(v) = f0 + f1 v + f2 v²."""
    return params.f0 + params.f1 * v + params.f2 * v * v


def acc_dynamics(x, u, t, params, d0=None):
    """State derivative of the cruise control plant at state (v_f, D).

    Examples:
        >>> params = AccParams(lead_v0=0.0, lead_segments=())
        >>> [round(float(v), 9) for v in acc_dynamics([0.0, 50.0], [0.0], 0.0, params)]
        [-6.0606e-05, 0.0]
    """
    x = as_vector(x, "state")
    u = as_vector(u, "input")
    lead = LeadProfile(params.lead_v0, params.lead_segments, params.lead_rate_bound)
    disturbance = 0.0 if d0 is None else d0(t)
    return np.array([(-drag(x[0], params) + u[0]) / params.mass + disturbance,
                     -x[0] + lead.speed(t)])


def acc_channels(params):
    """The speed channel (actuated) and the distance channel (driven by the lead speed)."""
    return [ChannelModel(1, lambda x: 1.0 / params.mass,
                         lambda x: -drag(x[0], params) / params.mass,
                         (0,), 0, 0, 2, name="v_f"),
            ChannelModel(1, lambda x: 0.0, lambda x: -x[0], (1,), 1, 0, 2,
                         actuated=False, known=bool(params.lead_known), name="D")]


def segway_terms(x, params):
    """Return f_υ, f_ω, g_υ, g_ω of the two-wheeled inverted pendulum.

    Works elementwise when x has shape (4, N).

    Exceptions:
        ModelDomain: If |φ| >= π/2.
    """
    _, phi, v, omega = x
    if np.any(np.abs(phi) >= math.pi / 2):
        raise ModelDomain("φ", phi)
    r = params.wheel_radius
    ml = params.body_mass * params.com_height
    a11 = params.wheel_mass + params.body_mass + params.wheel_inertia / r ** 2
    a22 = params.body_inertia + ml * params.com_height
    c = ml * np.cos(phi)
    det = a11 * a22 - c * c
    friction = -params.motor_damping * (v / r - omega)
    r1 = friction / r + ml * omega * omega * np.sin(phi)
    r2 = -friction + ml * params.gravity * np.sin(phi)
    f_v = (a22 * r1 - c * r2) / det
    f_omega = (a11 * r2 - c * r1) / det
    g_v = params.motor_gain * (a22 / r + c) / det
    g_omega = -params.motor_gain * (a11 + c / r) / det
    return f_v, f_omega, g_v, g_omega


def segway_dynamics(x, u, t, params, disturbances=None):
    """State derivative (υ, ω, f_υ + g_υu + d₁, f_ω + g_ωu + d₂) at state (p, φ, υ, ω)."""
    x = as_vector(x, "state")
    u = as_vector(u, "input")
    f_v, f_omega, g_v, g_omega = segway_terms(x, params)
    d1, d2 = (0.0, 0.0) if disturbances is None else (disturbances[0](t), disturbances[1](t))
    return np.array([x[2], x[3], f_v + g_v * u[0] + d1, f_omega + g_omega * u[0] + d2])


def segway_channels(params):
    """The position channel on (p, υ) and the pitch channel on (φ, ω), sharing one input."""
    return [ChannelModel(2, lambda x: segway_terms(x, params)[2],
                         lambda x: segway_terms(x, params)[0], (0, 2), 0, 0, 4, name="p"),
            ChannelModel(2, lambda x: segway_terms(x, params)[3],
                         lambda x: segway_terms(x, params)[1], (1, 3), 1, 0, 4, name="phi")]


def segway_nominal(x, params):
    """K_p (p − p_d) + K_υ υ + K_φ φ + K_ω ω.

    Examples:
        >>> segway_nominal([0.0, 0.0, 0.0, 0.0], SegwayParams())
        -4.0
    """
    p, phi, v, omega = x
    return (params.k_p * (p - params.p_target) + params.k_v * v
            + params.k_phi * phi + params.k_omega * omega)


def segway_energy(x, params):
    """Total mechanical energy, with the potential measured from the axle."""
    _, phi, v, omega = x
    r = params.wheel_radius
    ml = params.body_mass * params.com_height
    a11 = params.wheel_mass + params.body_mass + params.wheel_inertia / r ** 2
    a22 = params.body_inertia + ml * params.com_height
    kinetic = 0.5 * (a11 * v * v + 2 * ml * math.cos(phi) * v * omega + a22 * omega * omega)
    return kinetic + ml * params.gravity * math.cos(phi)


def segway_linearization(params):
    """Jacobians (A, B) of the undisturbed Segway at upright rest."""
    r = params.wheel_radius
    b = params.motor_damping
    ml = params.body_mass * params.com_height
    a11 = params.wheel_mass + params.body_mass + params.wheel_inertia / r ** 2
    a22 = params.body_inertia + ml * params.com_height
    det = a11 * a22 - ml * ml
    weight = ml * params.gravity
    a = np.zeros((4, 4))
    a[0, 2] = 1.0
    a[1, 3] = 1.0
    a[2, 1] = -ml * weight / det
    a[2, 2] = -b * (a22 / r ** 2 + ml / r) / det
    a[2, 3] = b * (a22 / r + ml) / det
    a[3, 1] = a11 * weight / det
    a[3, 2] = b * (a11 / r + ml / r ** 2) / det
    a[3, 3] = -b * (a11 + ml / r) / det
    _, _, g_v, g_omega = segway_terms(np.zeros(4), params)
    return a, np.array([[0.0], [0.0], [g_v], [g_omega]])


def reassemble(channels, x, u, disturbances):
    """Rebuild the full state derivative from the channel models.

    Every chain row copies the next state of its channel and every top row
    is b(x) + a(x) u + d.
    """
    x = as_vector(x, "state")
    u = as_vector(u, "input")
    dx = np.zeros(x.size)
    for channel, d in zip(channels, disturbances):
        states = channel.states
        for j in range(channel.order - 1):
            dx[states[j]] = x[states[j + 1]]
        dx[states[-1]] = channel.drift(x) + channel.gain(x) * u[channel.control] + d
    return dx


class Plant(ABC):
    """A plant in the form x' = f(x) + g(x) u + d(t) with its channel split.

    Subclasses set ``name``, ``state_names``, ``output_states``,
    ``disturbance_names``, ``params``, ``channels`` and ``input_box``.
    """
    name = "plant"
    state_names = ()
    output_states = ()
    disturbance_names = ()

    @abstractmethod
    def drift(self, x):
        """The nominal drift f(x)."""
        pass

    @abstractmethod
    def actuation(self, x):
        """The input matrix g(x), of shape (n, m)."""
        pass

    @abstractmethod
    def channel_disturbances(self, t):
        """The true disturbance of each channel at time t."""
        pass

    @abstractmethod
    def disturbance_bounds(self):
        """A DisturbanceBoundSpec per channel."""
        pass

    @abstractmethod
    def nominal(self, x, t):
        """The nominal input k(x)."""
        pass

    @abstractmethod
    def barrier(self, gain=None, alpha1=None, alpha2=None):
        """The safety barrier of the case study."""
        pass

    @abstractmethod
    def tracking_error(self, x, t):
        """The scalar tracking error reported in the metrics."""
        pass

    @abstractmethod
    def field(self, xs, us):
        """Vectorised f(x) + g(x) u for x of shape (n, N) and u of shape (m, N)."""
        pass

    @abstractmethod
    def dob_rate_bound(self):
        """Bound on the rate of the disturbance effect seen by the DOB baseline."""
        pass

    def clf(self, rate=5.0, slack_penalty=100.0):
        """The tracking CLF, or None when the nominal law tracks on its own."""
        return None

    @property
    def dimension(self):
        return len(self.state_names)

    @property
    def default_weight(self):
        return 1.0

    @property
    def state_box(self):
        return self.params.state_box

    def inject(self, values):
        """Place one value per channel on the top row of its chain."""
        out = np.zeros(self.dimension)
        for channel, value in zip(self.channels, values):
            out[channel.states[-1]] += value
        return out

    def disturbance(self, t):
        return self.inject(self.channel_disturbances(t))

    def known_disturbances(self, t):
        """Channel disturbances with the unknown ones zeroed."""
        return [d if c.known else 0.0 for c, d in zip(self.channels, self.channel_disturbances(t))]

    def dynamics(self, x, u, t):
        x = as_vector(x, "state")
        return self.drift(x) + self.actuation(x) @ as_vector(u, "input") + self.disturbance(t)

    def measure(self, x):
        return np.asarray(x, dtype=float)[list(self.output_states)]


class AccPlant(Plant):
    """Adaptive cruise control: follower speed v_f and gap D to the lead car."""
    name = "acc"
    state_names = ("v_f", "D")
    output_states = (0, 1)
    disturbance_names = ("d0",)

    def __init__(self, params=None, d0=None):
        self.params = params or AccParams()
        self.d0 = d0 or DisturbanceSignal("sinusoid", 0.2 * self.params.gravity, 10.0)
        self.lead = LeadProfile(self.params.lead_v0, tuple(self.params.lead_segments),
                                self.params.lead_rate_bound)
        self.channels = acc_channels(self.params)
        limit = self.params.input_fraction * self.params.mass * self.params.gravity
        self.input_box = (np.array([-limit]), np.array([limit]))

    def drift(self, x):
        return np.array([-drag(x[0], self.params) / self.params.mass, -x[0]])

    def actuation(self, x):
        return np.array([[1.0 / self.params.mass], [0.0]])

    def channel_disturbances(self, t):
        return [self.d0(t), self.lead.speed(t)]

    def disturbance_bounds(self):
        return [self.d0.bound_spec(), self.lead.bound_spec()]

    def nominal(self, x, t):
        return np.array([drag(x[0], self.params)])

    def barrier(self, gain=0.1, alpha1=None, alpha2=None):
        headway = self.params.headway
        return BarrierSpec(lambda x: x[1] - headway * x[0],
                           lambda x: np.array([-headway, 1.0]),
                           gain=0.1 if gain is None else gain, degree=1, lipschitz=0.0,
                           name="headway")

    def clf(self, rate=5.0, slack_penalty=100.0):
        v_d = self.params.v_desired
        return LyapunovSpec(lambda x: (x[0] - v_d) ** 2,
                            lambda x: np.array([2 * (x[0] - v_d), 0.0]),
                            rate, slack_penalty)

    @property
    def default_weight(self):
        return 1.0 / self.params.mass ** 2

    def tracking_error(self, x, t):
        return x[0] - self.params.v_desired

    def field(self, xs, us):
        v = xs[0]
        return np.stack([(-drag(v, self.params) + us[0]) / self.params.mass, -v])

    def dob_rate_bound(self):
        bounds = self.disturbance_bounds()
        rate = self.params.headway * bounds[0].rate
        if not self.params.lead_known:
            rate += bounds[1].rate
        return rate


class SegwayPlant(Plant):
    """Two-wheeled inverted pendulum with state (p, φ, υ, ω) and voltage input."""
    name = "segway"
    state_names = ("p", "phi", "v", "omega")
    output_states = (0, 1)
    disturbance_names = ("d1", "d2")

    def __init__(self, params=None, d1=None, d2=None):
        self.params = params or SegwayParams()
        self.d1 = d1 or DisturbanceSignal("sinusoid", 2.0, 10.0)
        self.d2 = d2 or DisturbanceSignal("sinusoid", 2.0, 10.0, math.pi / 2)
        self.channels = segway_channels(self.params)
        limit = self.params.input_limit
        self.input_box = (np.array([-limit]), np.array([limit]))

    def drift(self, x):
        f_v, f_omega, _, _ = segway_terms(x, self.params)
        return np.array([x[2], x[3], f_v, f_omega])

    def actuation(self, x):
        _, _, g_v, g_omega = segway_terms(x, self.params)
        return np.array([[0.0], [0.0], [g_v], [g_omega]])

    def channel_disturbances(self, t):
        return [self.d1(t), self.d2(t)]

    def disturbance_bounds(self):
        declared = self.params.rate_bounds or (None, None)
        specs = []
        for name, signal, rate in zip(self.disturbance_names, (self.d1, self.d2), declared):
            if rate is None:
                specs.append(signal.bound_spec())
                continue
            if signal.rate_bound > rate:
                raise ValueError(f"Rate of {name} {signal.rate_bound} exceeds the declared bound {rate}")
            specs.append(DisturbanceBoundSpec(rate, signal.magnitude_bound))
        return specs

    def nominal(self, x, t):
        return np.array([segway_nominal(x, self.params)])

    def barrier(self, gain=None, alpha1=5.0, alpha2=5.0):
        alpha1 = 5.0 if alpha1 is None else alpha1
        alpha2 = 5.0 if alpha2 is None else alpha2
        hessian = np.array([[-2 * alpha1, -2.0], [-2.0, 0.0]])
        return BarrierSpec(lambda x: math.pi / 10 - x[1] ** 2,
                           lambda x: np.array([0.0, -2 * x[1], 0.0, 0.0]),
                           degree=2, alpha1=alpha1, alpha2=alpha2,
                           lipschitz=float(np.linalg.norm(hessian, 2)),
                           lie=lambda x: -2 * x[1] * x[3],
                           lie_grad=lambda x: np.array([0.0, -2 * x[3], 0.0, -2 * x[1]]),
                           name="tilt")

    def tracking_error(self, x, t):
        return x[0] - self.params.p_target

    def field(self, xs, us):
        f_v, f_omega, g_v, g_omega = segway_terms(xs, self.params)
        return np.stack([xs[2], xs[3], f_v + g_v * us[0], f_omega + g_omega * us[0]])

    def dob_rate_bound(self):
        _, pitch = self.disturbance_bounds()
        phi_max = max(abs(b) for b in self.params.state_box[1])
        omega_max = max(abs(b) for b in self.params.state_box[3])
        return 2 * (omega_max * pitch.magnitude + phi_max * pitch.rate)


def make_plant(name, params=None, disturbances=None):
    """Build a plant by name from parameters and named disturbance signals."""
    disturbances = disturbances or {}
    if name == "acc":
        return AccPlant(params, disturbances.get("d0"))
    if name == "segway":
        return SegwayPlant(params, disturbances.get("d1"), disturbances.get("d2"))
    raise ValueError(f"Unknown plant: {name}")
