"""Parameter blocks for the emitter, pump, interferometer and detectors.

Units: times in ns, rates in 1/ns, jitter in ps, spectral widths in MHz.
Each block validates itself on construction and mirrors the JSON config
layout one-to-one.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent parameter set."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class EmitterParams:
    tau1: float = 4.04
    gamma_star: float = 0.0
    alpha_zpl: float = 1.0
    diffusion_sigma: float = 0.0
    diffusion_tau: float = 1.0e6
    background_rate: float = 0.0

    def __post_init__(self):
        _require(self.tau1 > 0, "emitter.tau1 must be > 0")
        _require(self.gamma_star >= 0, "emitter.gamma_star must be >= 0")
        _require(0 <= self.alpha_zpl <= 1, "emitter.alpha_zpl must lie in [0, 1]")
        _require(self.diffusion_sigma >= 0, "emitter.diffusion_sigma must be >= 0")
        _require(self.diffusion_tau > 0, "emitter.diffusion_tau must be > 0")
        _require(self.background_rate >= 0, "emitter.background_rate must be >= 0")


@dataclass(frozen=True)
class PumpParams:
    """Excitation. Only the fields of the active ``mode`` are read."""

    mode: str = "pulsed"
    saturation_s: float = 0.2
    duration: float = 0.0
    rep_rate: float = 24.79
    n_pulses: int = 0
    p_excite: float = 1.0

    def __post_init__(self):
        _require(self.mode in ("cw", "pulsed"), f"pump.mode must be 'cw' or 'pulsed', got {self.mode!r}")
        if self.mode == "cw":
            _require(self.saturation_s > 0, "pump.saturation_s must be > 0 in CW mode")
            _require(self.duration >= 0, "pump.duration must be >= 0")
        else:
            _require(self.rep_rate > 0, "pump.rep_rate must be > 0 in pulsed mode")
            _require(int(self.n_pulses) == self.n_pulses and self.n_pulses >= 0, "pump.n_pulses must be a non-negative integer")
            _require(0 <= self.p_excite <= 1, "pump.p_excite must lie in [0, 1]")

    @property
    def period(self) -> float:
        """Pulse period in ns (rep_rate is in MHz)."""
        return 1000.0 / self.rep_rate

    def pump_rate(self, tau1: float) -> float:
        """CW excitation rate k_p = s / (2 tau1)."""
        return self.saturation_s / (2.0 * tau1)


@dataclass(frozen=True)
class InterferometerParams:
    delta_t: float = 40.3
    r2: float = 0.5
    t2: float = 0.5
    excess_loss: float = 0.0
    pol_angle: float = 0.0
    arm_transmissions: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "arm_transmissions", tuple(float(x) for x in self.arm_transmissions))
        _require(self.delta_t > 0, "interferometer.delta_t must be > 0")
        _require(0 <= self.r2 <= 1 and 0 <= self.t2 <= 1, "interferometer.r2/t2 must lie in [0, 1]")
        _require(self.r2 + self.t2 <= 1 + 1e-12, "interferometer.r2 + t2 must be <= 1")
        _require(self.r2 + self.t2 > 0, "interferometer.r2 + t2 must be > 0")
        _require(0 <= self.excess_loss < 1, "interferometer.excess_loss must lie in [0, 1)")
        _require(len(self.arm_transmissions) == 2, "interferometer.arm_transmissions must be a pair")
        _require(all(0 <= x <= 1 for x in self.arm_transmissions), "arm transmissions must lie in [0, 1]")

    @property
    def R(self) -> float:
        """Reflectance normalised to a lossless splitter."""
        return self.r2 / (self.r2 + self.t2)

    @property
    def T(self) -> float:
        return self.t2 / (self.r2 + self.t2)

    @property
    def overlap_pol(self) -> float:
        """|<pol_a|pol_b>|^2."""
        return math.cos(self.pol_angle) ** 2


@dataclass(frozen=True)
class DetectorParams:
    efficiency: float = 1.0
    jitter_sigma: float = 0.0
    dead_time: float = 0.0

    def __post_init__(self):
        _require(0 <= self.efficiency <= 1, "detector.efficiency must lie in [0, 1]")
        _require(self.jitter_sigma >= 0, "detector.jitter_sigma must be >= 0")
        _require(self.dead_time >= 0, "detector.dead_time must be >= 0")


TOPOLOGIES = ("HBT", "HOM")
MODES = ("ensemble", "trajectory")


@dataclass(frozen=True)
class ExperimentConfig:
    emitter: EmitterParams = field(default_factory=EmitterParams)
    pump: PumpParams = field(default_factory=PumpParams)
    interferometer: InterferometerParams = field(default_factory=InterferometerParams)
    detectors: tuple[DetectorParams, DetectorParams] = (DetectorParams(), DetectorParams())
    topology: str = "HOM"
    mode: str = "ensemble"
    interference_window: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.detectors, DetectorParams):
            object.__setattr__(self, "detectors", (self.detectors, self.detectors))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        _require(len(self.detectors) == 2, "exactly two detectors are required")
        _require(self.topology in TOPOLOGIES, f"topology must be one of {TOPOLOGIES}")
        _require(self.mode in MODES, f"mode must be one of {MODES}")
        if self.interference_window is not None:
            _require(self.interference_window > 0, "interference_window must be > 0")

    @property
    def window(self) -> float:
        if self.interference_window is not None:
            return self.interference_window
        return 10.0 * self.emitter.tau1

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_params(self, block: str, **changes) -> "ExperimentConfig":
        """Copy with fields of one parameter block changed."""
        if block == "detectors":
            dets = tuple(dataclasses.replace(d, **changes) for d in self.detectors)
            return dataclasses.replace(self, detectors=dets)
        return dataclasses.replace(self, **{block: dataclasses.replace(getattr(self, block), **changes)})

    def to_dict(self) -> dict[str, Any]:
        d = {
            "topology": self.topology,
            "mode": self.mode,
            "seed": self.seed,
            "interference_window": self.interference_window,
            "emitter": dataclasses.asdict(self.emitter),
            "pump": dataclasses.asdict(self.pump),
            "interferometer": dataclasses.asdict(self.interferometer),
            "detectors": [dataclasses.asdict(x) for x in self.detectors],
        }
        d["interferometer"]["arm_transmissions"] = list(self.interferometer.arm_transmissions)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _block(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{name} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown field(s) in {name}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"topology", "mode", "seed", "interference_window", "emitter", "pump",
               "interferometer", "detector", "detectors", "outputs"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {sorted(unknown)}")
    if "detectors" in data:
        dets = data["detectors"]
        if isinstance(dets, dict):
            dets = [dets, dets]
        if not isinstance(dets, list) or len(dets) != 2:
            raise ConfigError("detectors must be an object or a list of two objects")
        detectors = tuple(_block(DetectorParams, d, "detectors[]") for d in dets)
    else:
        d = _block(DetectorParams, data.get("detector"), "detector")
        detectors = (d, d)
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return ExperimentConfig(
        emitter=_block(EmitterParams, data.get("emitter"), "emitter"),
        pump=_block(PumpParams, data.get("pump"), "pump"),
        interferometer=_block(InterferometerParams, data.get("interferometer"), "interferometer"),
        detectors=detectors,
        topology=data.get("topology", "HOM"),
        mode=data.get("mode", "ensemble"),
        interference_window=data.get("interference_window"),
        seed=seed,
    )


def load_config(path: str | Path) -> tuple[ExperimentConfig, dict[str, Any]]:
    """Read a JSON run config; returns the experiment and its ``outputs`` block."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(data)
    outputs = data.get("outputs") or {}
    if not isinstance(outputs, dict):
        raise ConfigError("outputs must be a JSON object")
    return cfg, outputs
