"""Scenario configuration: YAML in, validated dataclasses out."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import yaml

from ..access import RoutingConfig
from ..orbits import GroundStation
from ..scheduler import LinkConfig, Mode, StalenessPolicy

SECURITY_CHOICES = ("plaintext", "otp", "aead", "teleport_partial")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class TrainingSettings:
    qubits: int = 4  # f, also the feature count after reduction
    layers: int = 2
    classes: int = 2
    readout_scale: float = 2.0
    epochs: int = 1
    lr: float = 0.2
    lr_decay: float = 1.0
    batch_size: int = 16
    rounds: int = 10
    seconds_per_sample: float = 0.5
    init_scale: float = 0.1
    global_every_n_rounds: int = 1
    params: int | None = None  # d; derived as 3 * qubits * layers when omitted


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic:separable"  # CSV path or synthetic:<separable|eurosat>
    feature_count: int | None = None  # raw column count; checked when given
    reduce_to: int = 4
    train_fraction: float = 0.9
    distribution: str = "round_robin"  # or label_skew
    rows: int = 1000  # synthetic sources only


@dataclass(frozen=True)
class StalenessSettings:
    delta_max: float | None = None  # None -> 2 x round duration
    p_min_floor: float = 0.1
    carry_over: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    tle_path: str | None = None
    n_satellites: int = 50
    start_time: datetime = datetime(2025, 4, 24, 10, 6, 29, tzinfo=timezone.utc)
    duration: float = 6.0  # hours
    sample_time: float = 30.0
    round_duration: float = 360.0
    ground_stations: tuple = ()
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    topology: str = "orbital"  # or full_visibility
    full_visibility_primaries: int = 2
    mode: Mode = Mode.SIMULTANEOUS
    security: str = "plaintext"
    adversary: str = "none"
    link: LinkConfig = field(default_factory=LinkConfig)
    staleness: StalenessSettings = field(default_factory=StalenessSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    seed: int = 0

    @property
    def policy(self) -> StalenessPolicy:
        s = self.staleness
        dm = 2 * self.round_duration if s.delta_max is None else s.delta_max
        return StalenessPolicy(dm, s.p_min_floor, s.carry_over)

    @property
    def horizon_seconds(self) -> float:
        return self.duration * 3600.0

    def to_dict(self) -> dict:
        d = _plain(self)
        d["ground_stations"] = [_plain(g) for g in self.ground_stations]
        return d


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    if isinstance(obj, Mode):
        return obj.value
    if isinstance(obj, datetime):
        return obj.isoformat().replace("+00:00", "Z")
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


def default_stations() -> tuple[GroundStation, ...]:
    raw = json.loads(resources.files("satqfl.data").joinpath("ground_stations.json").read_text())
    return tuple(GroundStation(**g) for g in raw)


def default_tle_path() -> Path:
    return Path(str(resources.files("satqfl.data").joinpath("starlink_50.tle")))


# ---------------------------------------------------------------------------
# parsing


def _section(cls, raw, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
        kwargs[key] = _coerce(value, known[key].type, f"{path}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _coerce(value, typ, path):
    t = str(typ)
    if value is None:
        if "None" in t:
            return None
        raise ConfigError(path, "must not be null")
    try:
        if t.startswith("int"):
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if t.startswith("float"):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if t == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if t.startswith("str"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {t}, got {value!r}") from None
    return value


def _parse_time(value, path) -> datetime:
    if isinstance(value, datetime):
        dt = value
    else:
        try:
            dt = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
        except ValueError:
            raise ConfigError(path, f"not an ISO timestamp: {value!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def _parse_stations(raw, path):
    if raw is None:
        return default_stations()
    if not isinstance(raw, list) or not raw:
        raise ConfigError(path, "expected a non-empty list of stations")
    out = []
    for i, g in enumerate(raw):
        p = f"{path}[{i}]"
        if not isinstance(g, dict):
            raise ConfigError(p, "expected a mapping")
        try:
            out.append(GroundStation(str(g["name"]), float(g["latitude"]), float(g["longitude"]), float(g.get("altitude", 0.0))))
        except KeyError as exc:
            raise ConfigError(f"{p}.{exc.args[0]}", "missing") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(p, str(exc)) from None
    names = [g.name for g in out]
    if len(set(names)) != len(names):
        raise ConfigError(path, "station names must be unique")
    return tuple(out)


def config_from_dict(raw: dict | None) -> ScenarioConfig:
    raw = dict(raw or {})
    top = {f.name for f in fields(ScenarioConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(key, "unknown field")
    kw = {}
    for name in ("tle_path", "security", "topology", "adversary"):
        if name in raw and raw[name] is not None:
            kw[name] = str(raw[name])
    for name in ("n_satellites", "full_visibility_primaries", "seed"):
        if name in raw:
            kw[name] = _coerce(raw[name], "int", name)
    for name in ("duration", "sample_time", "round_duration"):
        if name in raw:
            kw[name] = _coerce(raw[name], "float", name)
    if "start_time" in raw:
        kw["start_time"] = _parse_time(raw["start_time"], "start_time")
    kw["ground_stations"] = _parse_stations(raw.get("ground_stations"), "ground_stations")
    kw["routing"] = _section(RoutingConfig, raw.get("routing"), "routing")
    kw["link"] = _section(LinkConfig, raw.get("link"), "link")
    kw["staleness"] = _section(StalenessSettings, raw.get("staleness"), "staleness")
    kw["training"] = _section(TrainingSettings, raw.get("training"), "training")
    kw["dataset"] = _section(DatasetSpec, raw.get("dataset"), "dataset")
    if "mode" in raw:
        kw["mode"] = parse_mode(raw["mode"])
    cfg = ScenarioConfig(**kw)
    validate(cfg)
    return cfg


def parse_mode(value) -> Mode:
    v = str(value).lower()
    aliases = {"async": "asynchronous", "sync": "simultaneous", "seq": "sequential"}
    try:
        return Mode(aliases.get(v, v))
    except ValueError:
        raise ConfigError("mode", f"expected one of {[m.value for m in Mode]}, got {value!r}") from None


def validate(cfg: ScenarioConfig) -> None:
    if cfg.n_satellites < 1:
        raise ConfigError("n_satellites", "must be at least 1")
    if cfg.sample_time <= 0:
        raise ConfigError("sample_time", "must be positive")
    if cfg.duration <= 0:
        raise ConfigError("duration", "must be positive")
    ratio = cfg.round_duration / cfg.sample_time
    if cfg.round_duration <= 0 or abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError("round_duration", "must be a positive multiple of sample_time")
    if cfg.topology not in ("orbital", "full_visibility"):
        raise ConfigError("topology", "expected orbital or full_visibility")
    if cfg.adversary not in ("none", "intercept_resend"):
        raise ConfigError("adversary", "expected none or intercept_resend")
    sec = cfg.security
    base = sec.split("(")[0]
    if base not in SECURITY_CHOICES:
        raise ConfigError("security", f"expected one of {SECURITY_CHOICES}, got {sec!r}")
    if base == "teleport_partial" and sec != base:
        inner = sec[len(base) :]
        if not (inner.startswith("(") and inner.endswith(")") and inner[1:-1].isdigit()):
            raise ConfigError("security", "teleport_partial takes a count, e.g. teleport_partial(2)")
    tr = cfg.training
    for name in ("qubits", "layers", "epochs", "batch_size", "global_every_n_rounds"):
        if getattr(tr, name) < 1:
            raise ConfigError(f"training.{name}", "must be at least 1")
    if tr.rounds < 0:
        raise ConfigError("training.rounds", "must be non-negative")
    if tr.lr < 0:
        raise ConfigError("training.lr", "must be non-negative")
    if not 0 < tr.lr_decay <= 1:
        raise ConfigError("training.lr_decay", "must lie in (0, 1]")
    if not 2 <= tr.classes <= 2 * tr.qubits:
        raise ConfigError("training.classes", f"must be in [2, {2 * tr.qubits}]")
    if tr.params is not None and tr.params != 3 * tr.qubits * tr.layers:
        raise ConfigError("training.params", f"d must equal 3 * qubits * layers = {3 * tr.qubits * tr.layers}")
    ds = cfg.dataset
    if not 0 < ds.train_fraction < 1:
        raise ConfigError("dataset.train_fraction", "must lie strictly between 0 and 1")
    if ds.reduce_to != tr.qubits:
        raise ConfigError("dataset.reduce_to", "must equal training.qubits (one feature per qubit)")
    if ds.feature_count is not None and ds.reduce_to > ds.feature_count:
        raise ConfigError("dataset.reduce_to", "cannot exceed dataset.feature_count")
    if ds.distribution not in ("round_robin", "label_skew"):
        raise ConfigError("dataset.distribution", "expected round_robin or label_skew")
    if cfg.staleness.delta_max is not None and not cfg.staleness.delta_max > 0:
        raise ConfigError("staleness.delta_max", "must be positive")
    if not 0 <= cfg.staleness.p_min_floor <= 1:
        raise ConfigError("staleness.p_min_floor", "must be a fraction")
    if cfg.topology == "orbital" and tr.rounds * cfg.round_duration > cfg.horizon_seconds + 1e-9:
        raise ConfigError("training.rounds", "rounds x round_duration exceeds the simulated duration")
    if cfg.link.link_rate_bps <= 0:
        raise ConfigError("link.link_rate_bps", "must be positive")


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("config", f"no such file: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    cfg = config_from_dict(raw)
    # relative paths resolve against the config file
    if cfg.tle_path and not Path(cfg.tle_path).is_absolute():
        cfg = replace(cfg, tle_path=str(path.parent / cfg.tle_path))
    src = cfg.dataset.source
    if not src.startswith("synthetic:") and not Path(src).is_absolute():
        cfg = replace(cfg, dataset=replace(cfg.dataset, source=str(path.parent / src)))
    return cfg


def override(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    """Apply CLI-style overrides (``mode``, ``security``, ``seed``) and revalidate."""
    kw = {}
    for k, v in changes.items():
        if v is None:
            continue
        kw[k] = parse_mode(v) if k == "mode" else v
    out = replace(cfg, **kw)
    validate(out)
    return out


__all__ = [
    "ConfigError",
    "DatasetSpec",
    "ScenarioConfig",
    "StalenessSettings",
    "TrainingSettings",
    "config_from_dict",
    "default_stations",
    "default_tle_path",
    "load_config",
    "override",
    "parse_mode",
    "validate",
]
