import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, TypeVar

from .experiments import MYOPIC_OPTIMAL, ErrorModel, MultiMessageConfig
from .mcsim import (
    ContactModel,
    ExponentialContacts,
    InitialAssignment,
    MCConfig,
    TruncatedPowerLaw,
)
from .metrics import StoppingPenalty
from .model import (
    ModelParams,
    ParameterError,
    StateVector,
    exponential_penalties,
    linear_penalties,
    power_penalties,
)
from .optimize import SearchConfig
from .policy import ForwardingPolicy, HeuristicClass, policy_from_dict

# Define the public API of this module
__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "ExperimentConfig",
    "RunConfig",
    "parse_config",
    "load_config",
]

#: The only configuration layout this version reads
SCHEMA_VERSION = 1

D = TypeVar("D")


class ConfigError(Exception):
    """Raised if a configuration document is malformed, has unknown keys or
    breaks a model invariant"""


@dataclass(frozen=True)
class ExperimentConfig:
    """Sweep settings of the scripted experiments

    Attributes:
        values: Swept values, p for validation, beta for the heuristic sweep,
            error magnitudes for robustness
        variable: Error swept by the robustness experiment
        classes: Heuristic classes compared in the heuristic sweep
        families: Families run by the multi-message experiment
    """

    values: Tuple[float, ...] = ()
    variable: str = ErrorModel.THETA_STAR.value
    classes: Tuple[str, ...] = tuple(c.value for c in HeuristicClass)
    families: Tuple[str, ...] = (MYOPIC_OPTIMAL,) + tuple(
        c.value for c in HeuristicClass
    )

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "families", tuple(self.families))
        ErrorModel(self.variable)
        for c in self.classes:
            HeuristicClass(c)


@dataclass(frozen=True)
class RunConfig:
    """Everything a command needs, validated

    Attributes:
        model: Model constants
        init: Initial state
        policy: Explicit policy for simulate, verify and montecarlo
        search: Optimizer settings
        montecarlo: Ensemble settings, seeded from ``seed``
        stopping: Terminal time penalty of the stopping problem
        multi_message: Successive message settings
        experiment: Sweep settings
        seed: Root seed of every random draw
    """

    model: ModelParams
    init: StateVector
    policy: Optional[ForwardingPolicy] = None
    search: SearchConfig = SearchConfig()
    montecarlo: MCConfig = field(default_factory=MCConfig)
    stopping: StoppingPenalty = StoppingPenalty()
    multi_message: MultiMessageConfig = MultiMessageConfig()
    experiment: ExperimentConfig = ExperimentConfig()
    seed: int = 0

    def with_overrides(
        self, seed: Optional[int] = None, threads: Optional[int] = None
    ) -> "RunConfig":
        """Apply the command line ``--seed`` and ``--threads`` flags"""
        cfg = self
        if seed is not None:
            montecarlo = replace(cfg.montecarlo, seed=seed)
            cfg = replace(cfg, seed=seed, montecarlo=montecarlo)
        if threads is not None:
            cfg = replace(
                cfg,
                search=replace(cfg.search, threads=threads),
                montecarlo=replace(cfg.montecarlo, threads=threads),
            )
        return cfg


def _mapping(value: Any, path: str) -> Dict[str, Any]:
    if not isinstance(value, dict):
        raise ConfigError(f"{path} must be an object, got {value!r}")
    return dict(value)


def _check_keys(payload: Dict[str, Any], allowed, path: str):
    unknown = sorted(set(payload) - set(allowed))
    if unknown:
        raise ConfigError(
            f"Unknown key {path}.{unknown[0]}, expected one of {sorted(allowed)}"
        )


def _build(cls: Type[D], value: Any, path: str, **extra) -> D:
    payload = _mapping(value, path)
    names = [f.name for f in dataclasses.fields(cls)]  # type: ignore
    _check_keys(payload, names, path)
    try:
        return cls(**payload, **extra)
    except (ParameterError, ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _penalties(value: Any, B: int, path: str) -> Tuple[float, ...]:
    if isinstance(value, list):
        return tuple(value)
    payload = _mapping(value, path)
    _check_keys(payload, ["form", "alpha"], path)
    form = payload.get("form")
    if form == "power":
        return power_penalties(B, float(payload.get("alpha", 2.0)))
    elif form == "linear":
        return linear_penalties(B)
    elif form == "exponential":
        return exponential_penalties(B)
    raise ConfigError(
        f"{path}.form must be power, linear or exponential, got {form!r}"
    )


def _model(value: Any) -> ModelParams:
    payload = _mapping(value, "model")
    names = [f.name for f in dataclasses.fields(ModelParams)]
    _check_keys(payload, names, "model")
    if "B" not in payload or "penalties" not in payload:
        raise ConfigError("model needs at least B and penalties")
    payload["penalties"] = _penalties(
        payload["penalties"], payload["B"], "model.penalties"
    )
    return _build(ModelParams, payload, "model")


def _init(value: Any, params: ModelParams) -> StateVector:
    payload = _mapping(value, "init")
    _check_keys(payload, ["S", "I"], "init")
    try:
        state = StateVector(S=payload.get("S", []), I=payload.get("I", []))
        state.check(params)
    except ValueError as e:
        raise ConfigError(f"init: {e}") from e
    return state


def _policy(value: Any, params: ModelParams) -> ForwardingPolicy:
    try:
        policy = policy_from_dict(_mapping(value, "policy"))
        # Time-only policies can be checked against the model right away
        policy.timed_control(params)
    except NotImplementedError:
        pass
    except ValueError as e:
        raise ConfigError(f"policy: {e}") from e
    return policy


def _contact(value: Any) -> ContactModel:
    payload = _mapping(value, "montecarlo.contact")
    kind = payload.pop("kind", "exponential")
    if kind == "exponential":
        return _build(ExponentialContacts, payload, "montecarlo.contact")
    elif kind == "power-law":
        return _build(TruncatedPowerLaw, payload, "montecarlo.contact")
    raise ConfigError(
        f"montecarlo.contact.kind must be exponential or power-law, got {kind!r}"
    )


def _montecarlo(value: Any, seed: int) -> MCConfig:
    payload = _mapping(value, "montecarlo")
    if "seed" in payload:
        raise ConfigError("Unknown key montecarlo.seed, the root seed is used")
    if "contact" in payload:
        payload["contact"] = _contact(payload["contact"])
    if "assignment" in payload:
        try:
            payload["assignment"] = InitialAssignment(payload["assignment"])
        except ValueError as e:
            raise ConfigError(f"montecarlo.assignment: {e}") from e
    return _build(MCConfig, payload, "montecarlo", seed=seed)


def parse_config(doc: Dict[str, Any]) -> RunConfig:
    """Validate a configuration document and build the `RunConfig`

    Raises:
        ConfigError: On a wrong schema_version, unknown keys at any level or
            values that break a model invariant
    """
    doc = _mapping(doc, "config")
    _check_keys(
        doc,
        ["schema_version"] + [f.name for f in dataclasses.fields(RunConfig)],
        "config",
    )
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got "
            f"{doc.get('schema_version')!r}"
        )
    if "model" not in doc or "init" not in doc:
        raise ConfigError("config needs model and init sections")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    model = _model(doc["model"])
    parts: Dict[str, Any] = dict(
        model=model,
        init=_init(doc["init"], model),
        seed=seed,
        montecarlo=_montecarlo(doc.get("montecarlo", {}), seed),
    )
    if "policy" in doc:
        parts["policy"] = _policy(doc["policy"], model)
    for name, cls in [
        ("search", SearchConfig),
        ("stopping", StoppingPenalty),
        ("multi_message", MultiMessageConfig),
        ("experiment", ExperimentConfig),
    ]:
        if name in doc:
            parts[name] = _build(cls, doc[name], name)
    return RunConfig(**parts)


def load_config(path: Path) -> RunConfig:
    """Read and validate a JSON configuration file"""
    try:
        with open(path) as stream:
            doc = json.load(stream)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    return parse_config(doc)
