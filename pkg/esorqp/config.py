"""Scenario configuration read from YAML files.

A scenario file names a plant and overrides any subset of that plant's
defaults::

    plant: acc
    controller: esor_qp
    horizon: 30.0
    observer:
      bandwidth: 20.0
    disturbances:
      d0: {kind: sinusoid, amplitude: 1.962, period: 10.0}

Unknown keys are rejected at every level.
"""
from collections import namedtuple
import logging
import math

import numpy as np
import yaml
try:
    from yaml import CLoader as YamlLoader
except ImportError:
    from yaml import FullLoader as YamlLoader

from .plants import AccParams, DisturbanceSignal, SegwayParams, make_plant
from .utils import EsorError

logger = logging.getLogger(__name__)

CONTROLLERS = ("esor_qp", "true_d_qp", "nominal_qp", "dob_cbf_qp")
ROBUST_MODES = ("strict", "steady_state")
OBSERVER_MODES = ("continuous", "discrete")


class ConfigError(EsorError):
    """Exception raised for an invalid scenario configuration.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, message):
        super().__init__(message)


ObserverConfig = namedtuple("ObserverConfig",
                            ["bandwidth", "mode", "sample_time", "discrete_bandwidth"],
                            defaults=[20.0, "continuous", 1e-4, None])
ObserverConfig.__doc__ = """Observer settings.

    ``bandwidth`` is ω_o; ``sample_time`` is the T of the error bounds and,
    in discrete mode, of the observer itself; ``discrete_bandwidth`` is ω_od
    and defaults to e^(−ω_o T).
"""

BarrierConfig = namedtuple("BarrierConfig", ["gain", "alpha1", "alpha2"],
                           defaults=[None, 5.0, 5.0])
ClfConfig = namedtuple("ClfConfig", ["rate", "slack_penalty"], defaults=[5.0, 100.0])
DobConfig = namedtuple("DobConfig", ["gain", "rate_bound"], defaults=[10.0, None])
BoundsConfig = namedtuple("BoundsConfig", ["grid", "transient"], defaults=[11, 1.0])

ScenarioConfig = namedtuple("ScenarioConfig",
                            ["plant", "controller", "horizon", "dt_sim", "dt_ctrl", "seed",
                             "initial_state", "robust_mode", "input_weight", "observer",
                             "barrier", "clf", "dob", "bounds", "params", "disturbances",
                             "output"],
                            defaults=["acc", "esor_qp", 30.0, 1e-4, 1e-3, 0, (20.0, 100.0),
                                      "steady_state", None, ObserverConfig(), BarrierConfig(),
                                      ClfConfig(), DobConfig(), BoundsConfig(), AccParams(),
                                      {}, "out"])

SECTIONS = {"observer": ObserverConfig, "barrier": BarrierConfig, "clf": ClfConfig,
            "dob": DobConfig, "bounds": BoundsConfig}
PARAMS = {"acc": AccParams, "segway": SegwayParams}


def default_config(plant="acc"):
    """The default scenario of a plant.

    Examples:
        >>> default_config("segway").initial_state
        (-2.0, 0.0, 0.0, 0.0)
    """
    if plant == "acc":
        return ScenarioConfig(barrier=BarrierConfig(gain=0.1),
                              disturbances={"d0": DisturbanceSignal("sinusoid", 0.2 * 9.81, 10.0)})
    if plant == "segway":
        return ScenarioConfig(plant="segway", horizon=20.0, initial_state=(-2.0, 0.0, 0.0, 0.0),
                              params=SegwayParams(),
                              disturbances={"d1": DisturbanceSignal("sinusoid", 2.0, 10.0),
                                            "d2": DisturbanceSignal("sinusoid", 2.0, 10.0,
                                                                    math.pi / 2)})
    raise ConfigError(f"Unknown plant: {plant}")


def random_generator(cfg):
    """The generator behind randomized checks, seeded from ``cfg.seed``.

    Scenario runs are deterministic and never draw from it.

    Examples:
        >>> first = random_generator(default_config()).normal()
        >>> first == random_generator(default_config()).normal()
        True
    """
    return np.random.default_rng(cfg.seed)


def _plain(value):
    if hasattr(value, "_asdict"):
        return {k: _plain(v) for k, v in value._asdict().items()}
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def config_to_dict(cfg):
    """Convert a ScenarioConfig to plain dicts and lists, ready for YAML."""
    return _plain(cfg)


def _merge(base, override):
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _from_kwargs(cls, kwargs, path=""):
    if not isinstance(kwargs, dict):
        raise ConfigError(f"Expected a mapping at {path or 'top level'}, got {kwargs!r}")
    for key in kwargs:
        if key not in cls._fields:
            raise ConfigError("Invalid key in scenario config: " + path + key)
    return cls(**{k: _tupled(v) for k, v in kwargs.items()})


def _config_from_kwargs(kwargs):
    kwargs = dict(kwargs)
    for key in kwargs:
        if key not in ScenarioConfig._fields:
            raise ConfigError("Invalid key in scenario config: " + key)
    for key, section in SECTIONS.items():
        if key in kwargs:
            kwargs[key] = _from_kwargs(section, kwargs[key], key + ".")
    plant = kwargs.get("plant", "acc")
    if plant not in PARAMS:
        raise ConfigError(f"Unknown plant: {plant}")
    kwargs["params"] = _from_kwargs(PARAMS[plant], kwargs.get("params", {}), "params.")
    names = make_plant(plant).disturbance_names
    disturbances = {}
    for name, signal in (kwargs.get("disturbances") or {}).items():
        if name not in names:
            raise ConfigError("Invalid key in scenario config: disturbances." + name)
        disturbances[name] = _from_kwargs(DisturbanceSignal, signal, f"disturbances.{name}.")
    kwargs["disturbances"] = disturbances
    if "initial_state" in kwargs:
        kwargs["initial_state"] = tuple(float(v) for v in kwargs["initial_state"])
    return ScenarioConfig(**kwargs)


def config_from_dict(data):
    """Build a validated ScenarioConfig from a mapping merged over the plant defaults.

    Exceptions:
        ConfigError: If a key is unknown or a value invalid.

    Examples:
        >>> config_from_dict({"plant": "acc", "observer": {"bandwidth": 40}}).observer.bandwidth
        40
    """
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"Scenario config must be a mapping, got {type(data).__name__}")
    merged = _merge(config_to_dict(default_config(data.get("plant", "acc"))), data)
    cfg = _config_from_kwargs(merged)
    validate(cfg)
    return cfg


def read_config(path):
    """Read a scenario from a YAML (or JSON) file."""
    with open(path) as f:
        data = yaml.load(f, Loader=YamlLoader)
    logger.debug("Read scenario config from %s", path)
    return config_from_dict(data)


def read_config_str(text):
    """Read a scenario from a YAML string.

    Examples:
        >>> read_config_str("plant: segway\\ncontroller: dob_cbf_qp").controller
        'dob_cbf_qp'
    """
    return config_from_dict(yaml.load(text, Loader=YamlLoader))


def write_config(cfg, path):
    """Write a scenario to a YAML file."""
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=False)


def _close(a, b):
    return abs(a - b) <= 1e-9 * max(abs(a), abs(b))


def validate(cfg):
    """Check the cross-field rules of a scenario.

    Exceptions:
        ConfigError: On the first violated rule.
    """
    if cfg.plant not in PARAMS:
        raise ConfigError(f"Unknown plant: {cfg.plant}")
    if not isinstance(cfg.params, PARAMS[cfg.plant]):
        raise ConfigError(f"Parameters do not belong to plant {cfg.plant}")
    if cfg.controller not in CONTROLLERS:
        raise ConfigError(f"Unknown controller {cfg.controller}, expected one of {CONTROLLERS}")
    if cfg.robust_mode not in ROBUST_MODES:
        raise ConfigError(f"Unknown robust mode {cfg.robust_mode}, expected one of {ROBUST_MODES}")
    if not cfg.horizon > 0:
        raise ConfigError(f"Horizon must be positive, got {cfg.horizon}")
    if not (cfg.dt_sim > 0 and cfg.dt_ctrl > 0):
        raise ConfigError("Time steps must be positive")
    ratio = cfg.dt_ctrl / cfg.dt_sim
    if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-9 * ratio:
        raise ConfigError(f"dt_ctrl = {cfg.dt_ctrl} must be an integer multiple of dt_sim = {cfg.dt_sim}")
    if len(cfg.initial_state) != len(make_plant(cfg.plant).state_names):
        raise ConfigError(f"Initial state {cfg.initial_state} does not match plant {cfg.plant}")
    observer = cfg.observer
    if observer.mode not in OBSERVER_MODES:
        raise ConfigError(f"Unknown observer mode {observer.mode}, expected one of {OBSERVER_MODES}")
    if not (observer.bandwidth > 0 and observer.sample_time > 0):
        raise ConfigError("Observer bandwidth and sample time must be positive")
    if observer.discrete_bandwidth is not None and not 0 <= observer.discrete_bandwidth < 1:
        raise ConfigError(f"Discrete bandwidth must lie in [0, 1), got {observer.discrete_bandwidth}")
    if observer.mode == "discrete" and not _close(observer.sample_time, cfg.dt_sim):
        raise ConfigError("A discrete observer needs observer.sample_time equal to dt_sim")
    if not cfg.dob.gain > 0:
        raise ConfigError(f"DOB gain must be positive, got {cfg.dob.gain}")
    if cfg.bounds.grid < 2 or cfg.bounds.transient < 0:
        raise ConfigError("Bound grid needs at least 2 points and a non-negative transient")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"Seed must be a non-negative integer, got {cfg.seed!r}")
    if cfg.input_weight is not None and not cfg.input_weight > 0:
        raise ConfigError(f"Input weight must be positive, got {cfg.input_weight}")
    for signal in cfg.disturbances.values():
        if signal.kind not in ("sinusoid", "constant", "zero"):
            raise ConfigError(f"Unknown disturbance kind: {signal.kind}")
        if signal.kind == "sinusoid" and not signal.period > 0:
            raise ConfigError(f"Sinusoid period must be positive, got {signal.period}")
    return cfg


def replace_path(cfg, path, value):
    """Return a copy of the config with the dotted field ``path`` set to ``value``.

    Examples:
        >>> replace_path(default_config(), "observer.bandwidth", 5.0).observer.bandwidth
        5.0
    """
    head, _, rest = path.partition(".")
    if isinstance(cfg, dict):
        if head not in cfg:
            raise ConfigError("Invalid key in scenario config: " + path)
        updated = dict(cfg)
        updated[head] = replace_path(cfg[head], rest, value) if rest else value
        return updated
    if head not in cfg._fields:
        raise ConfigError("Invalid key in scenario config: " + path)
    if not rest:
        updated = cfg._replace(**{head: value})
    else:
        updated = cfg._replace(**{head: replace_path(getattr(cfg, head), rest, value)})
    if isinstance(updated, ScenarioConfig):
        validate(updated)
    return updated


def build_plant(cfg):
    """Instantiate the plant of a scenario."""
    return make_plant(cfg.plant, cfg.params, cfg.disturbances)
