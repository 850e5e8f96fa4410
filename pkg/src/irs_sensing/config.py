"""Declarative experiment configuration loaded from YAML.

Every section is optional; an empty file yields the full-scale setup
(20 bands of 64 points, alpha 3.71, beta 10**3.154, a 100-element IRS).
Unknown keys are rejected so that typos do not silently fall back to defaults.
"""

import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np
import yaml

from .channel import GEOMETRIES, IrsConfig, PathLossParams, PhasePolicy, ShadowingModel
from .collab import SCHEMES, TrainingConfig
from .neuralnet import NetConfig
from .simgen import SpectrumConfig

OUTPUT_ENV = "IRS_SENSING_OUTPUT"
DEFAULT_OUTPUT = "results"


class ConfigError(ValueError):
    """Raised for any malformed or inconsistent experiment file.

    ``code`` tells the failure kinds apart: ``missing``, ``syntax`` or ``invalid``.
    """

    code = "invalid"


class ConfigMissingError(ConfigError):
    code = "missing"


class ConfigSyntaxError(ConfigError):
    code = "syntax"


@dataclass(frozen=True)
class ChannelSpec:
    geometry: str = "cluster"
    geometry_params: dict = field(default_factory=dict)
    n_su: int = 10
    pathloss: PathLossParams = field(default_factory=PathLossParams)
    shadowing: ShadowingModel = field(default_factory=ShadowingModel)
    irs: IrsConfig = field(default_factory=IrsConfig)
    gain_samples: int = 200  # shadowing snapshots per point of the gain-vs-SNR sweep


@dataclass(frozen=True)
class TopologySpec:
    kind: str = "windows"  # "windows", "full" or "masks"
    width: int | None = None
    masks: tuple | None = None


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "default"
    shallow_filters: int = 40
    dtype: str = "float64"

    def build(self, n_points, n_bands):
        return NetConfig.with_variant(n_points, n_bands, self.variant,
                                      shallow_filters=self.shallow_filters, dtype=self.dtype)


@dataclass(frozen=True)
class ExperimentConfig:
    spectrum: SpectrumConfig = field(default_factory=lambda: SpectrumConfig(n_frames=16))
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    topology: TopologySpec = field(default_factory=TopologySpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    schemes: tuple = SCHEMES
    # schemes that are also run with the IRS switched off, for the with/without curves
    no_irs_schemes: tuple = ("standalone", "decoupled")
    snr_list: tuple = (-16.0, -14.0, -12.0, -10.0)
    seeds: tuple = (0, 1, 2)
    n_train: int = 10000
    n_test: int = 2000
    output_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        validate(self)

    @property
    def out_dir(self):
        return self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT

    def net_config(self):
        return self.network.build(self.spectrum.n_points, self.spectrum.n_bands)


DESK_SCALE = {
    "spectrum": {"n_bands": 8, "n_points": 32},
    "channel": {"n_su": 4},
    "training": {"rounds": 5, "eta0": 0.1},
    "network": {"dtype": "float32"},
    "n_train": 2000,
    "n_test": 500,
    "seeds": [0, 1, 2],
    "snr_list": [-16, -14, -12, -10],
}


def validate(cfg: ExperimentConfig):
    if not cfg.snr_list:
        raise ConfigError("snr_list must not be empty")
    if not all(math.isfinite(s) for s in cfg.snr_list):
        raise ConfigError("snr_list entries must be finite")
    if not cfg.seeds:
        raise ConfigError("seeds must not be empty")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be distinct")
    if any(not isinstance(s, int) or s < 0 for s in cfg.seeds):
        raise ConfigError("seeds must be non-negative integers")
    if not cfg.schemes:
        raise ConfigError("schemes must not be empty")
    for s in (*cfg.schemes, *cfg.no_irs_schemes):
        if s not in SCHEMES:
            raise ConfigError(f"unknown scheme {s!r}; choose from {', '.join(SCHEMES)}")
    if cfg.n_train < 1 or cfg.n_test < 1:
        raise ConfigError("n_train and n_test must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    ch = cfg.channel
    if ch.geometry not in GEOMETRIES:
        raise ConfigError(f"unknown geometry {ch.geometry!r}; choose from {', '.join(GEOMETRIES)}")
    if ch.n_su < 1:
        raise ConfigError("channel.n_su must be >= 1")
    if ch.gain_samples < 1:
        raise ConfigError("channel.gain_samples must be >= 1")
    try:
        # a throwaway draw catches misspelt or out-of-range geometry parameters now
        GEOMETRIES[ch.geometry](cfg.spectrum.n_bands, ch.n_su, np.random.default_rng(0),
                                irs=ch.irs, pathloss=ch.pathloss, shadowing=ch.shadowing,
                                **ch.geometry_params)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"channel.geometry_params: {e}") from None
    topo = cfg.topology
    if topo.kind not in ("windows", "full", "masks"):
        raise ConfigError(f"unknown topology kind {topo.kind!r}")
    if topo.kind == "masks":
        if not topo.masks or len(topo.masks) != ch.n_su:
            raise ConfigError(f"topology.masks needs one row per SU ({ch.n_su})")
        if any(len(row) != cfg.spectrum.n_bands for row in topo.masks):
            raise ConfigError(f"every mask row needs {cfg.spectrum.n_bands} entries")
    if topo.width is not None and not 1 <= topo.width <= cfg.spectrum.n_bands:
        raise ConfigError("topology.width must lie in [1, n_bands]")
    if cfg.network.dtype not in ("float32", "float64"):
        raise ConfigError("network.dtype must be float32 or float64")
    try:
        cfg.net_config()
    except ValueError as e:
        raise ConfigError(f"network: {e}") from None


def _build(cls, section, data, convert=None):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    kwargs = dict(data)
    if convert:
        kwargs = convert(kwargs)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def _channel(d):
    if "pathloss" in d:
        d["pathloss"] = _build(PathLossParams, "channel.pathloss", d["pathloss"])
    if "shadowing" in d:
        d["shadowing"] = _build(ShadowingModel, "channel.shadowing", d["shadowing"])
    if "irs" in d:
        def irs(x):
            if x.get("position") is not None:
                x["position"] = tuple(float(v) for v in x["position"])
            if "phase_policy" in x:
                try:
                    x["phase_policy"] = PhasePolicy(x["phase_policy"])
                except ValueError:
                    raise ConfigError(f"unknown phase_policy {x['phase_policy']!r}") from None
            return x
        d["irs"] = _build(IrsConfig, "channel.irs", d["irs"], irs)
    d["geometry_params"] = dict(d.get("geometry_params") or {})
    return d


def _topology(d):
    if d.get("masks") is not None:
        d["masks"] = tuple(tuple(int(v) for v in row) for row in d["masks"])
        d.setdefault("kind", "masks")
    return d


def _top(d):
    sections = {
        "spectrum": lambda v: _build(SpectrumConfig, "spectrum", {"n_frames": 16, **(v or {})}),
        "channel": lambda v: _build(ChannelSpec, "channel", v, _channel),
        "topology": lambda v: _build(TopologySpec, "topology", v, _topology),
        "training": lambda v: _build(TrainingConfig, "training", v),
        "network": lambda v: _build(NetworkSpec, "network", v),
    }
    for key, make in sections.items():
        if key in d:
            d[key] = make(d[key])
    for key in ("schemes", "no_irs_schemes", "snr_list", "seeds"):
        if key in d:
            v = d[key]
            if isinstance(v, (str, int, float)):
                v = [v]
            if not isinstance(v, list):
                raise ConfigError(f"{key} must be a list")
            d[key] = tuple(float(x) for x in v) if key == "snr_list" else tuple(v)
    return d


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(data, desk_scale=False) -> ExperimentConfig:
    """Build a validated config; ``desk_scale`` overlays the reduced test profile."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("experiment file must contain a mapping at the top level")
    if desk_scale:
        data = _merge(data, DESK_SCALE)
    return _build(ExperimentConfig, "experiment", data, _top)


def parse_config(path, desk_scale=False) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigMissingError(f"cannot read {path}: {e.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigSyntaxError(f"{path}: invalid YAML: {e}") from None
    return config_from_dict(data, desk_scale)


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with top-level fields replaced and re-validated."""
    try:
        return replace(cfg, **changes)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
