import configparser
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from cmaxsim.core.errors import ConfigError


class Settings:
    def __init__(self) -> None:
        self.app_name = os.getenv("APP_NAME", "cmaxsim")
        self.log_level = os.getenv("CMAXSIM_LOG_LEVEL", "INFO")
        self.log_format = os.getenv("CMAXSIM_LOG_FORMAT", "text")
        self.log_file = os.getenv("CMAXSIM_LOG_FILE") or None
        self.energy_table_path = os.getenv("CMAXSIM_ENERGY_TABLE") or None


settings = Settings()


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def _blank_to_none(value: Any) -> Any:
    if isinstance(value, str) and not value.strip():
        return None
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RunSection(_Section):
    seed: int = 0
    mode: str = "adaptive"
    # power-of-two denominator for the integer test mode; unset = plain doubles
    quantum: Optional[int] = None

    @field_validator("mode")
    @classmethod
    def check_mode(cls, v: str) -> str:
        if v not in ("full", "fixed", "adaptive", "all"):
            raise ValueError("mode must be one of full, fixed, adaptive, all")
        return v

    @field_validator("quantum", mode="before")
    @classmethod
    def check_quantum_blank(cls, v: Any) -> Any:
        return _blank_to_none(v)

    @field_validator("quantum")
    @classmethod
    def check_quantum(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and (v <= 0 or v & (v - 1)):
            raise ValueError("quantum must be a positive power of two")
        return v

    @property
    def methods(self) -> List[str]:
        return ["full", "fixed", "adaptive"] if self.mode == "all" else [self.mode]


class DatasetSection(_Section):
    events: Optional[str] = None
    imu: Optional[str] = None
    calib: Optional[str] = None
    width: int = 240
    height: int = 180

    @field_validator("events", "imu", "calib", mode="before")
    @classmethod
    def blank_paths(cls, v: Any) -> Any:
        return _blank_to_none(v)


class WindowSection(_Section):
    size: int = 20000
    max_windows: Optional[int] = None

    @field_validator("max_windows", mode="before")
    @classmethod
    def check_blank(cls, v: Any) -> Any:
        return _blank_to_none(v)

    @field_validator("size")
    @classmethod
    def check_size(cls, v: int) -> int:
        if v < 1:
            raise ValueError("window size must be at least 1 event")
        return v


class ScheduleSection(_Section):
    tau: List[float] = [0.02, 0.01, 0.005]
    sigma: List[float] = [1.0, 1.0, 1.0]
    fixed_iters: Optional[List[int]] = None
    stage_cap: int = 50
    window_cap: int = 200

    @field_validator("tau", "sigma", "fixed_iters", mode="before")
    @classmethod
    def check_lists(cls, v: Any) -> Any:
        return _split_list(_blank_to_none(v))

    @model_validator(mode="after")
    def check_lengths(self) -> "ScheduleSection":
        if len(self.tau) != 3 or not all(t >= 0 for t in self.tau):
            raise ValueError("tau needs three non-negative values (s = 1/4, 1/2, 1)")
        if len(self.sigma) != 3 or any(s < 0 for s in self.sigma):
            raise ValueError("sigma needs three non-negative values (s = 1/4, 1/2, 1)")
        if self.fixed_iters is not None and len(self.fixed_iters) != 3:
            raise ValueError("fixed_iters needs three counts (s = 1/4, 1/2, 1)")
        return self


class OptimizerSection(_Section):
    step: float = 1e-3
    max_halvings: int = 8
    max_doublings: int = 12


class EngineSection(_Section):
    engine: bool = True
    baseline: bool = True
    cross_check: bool = True
    energy_table: Optional[str] = None
    clock_hz: float = 200e6
    logic_power_mw: float = 42.78
    realtime_ms: float = 5.72

    @field_validator("energy_table", mode="before")
    @classmethod
    def check_blank(cls, v: Any) -> Any:
        return _blank_to_none(v)


class SynthSection(_Section):
    omega: List[float] = [0.6, -0.4, 0.9]
    duration: float = 0.2
    points: int = 400
    noise: float = 0.0
    imu_rate: float = 1000.0
    width: int = 64
    height: int = 48
    fx: float = 60.0
    fy: float = 60.0
    cx: float = 32.0
    cy: float = 24.0

    @field_validator("omega", mode="before")
    @classmethod
    def check_lists(cls, v: Any) -> Any:
        return _split_list(v)

    @model_validator(mode="after")
    def check_synth(self) -> "SynthSection":
        if len(self.omega) != 3:
            raise ValueError("omega needs three components")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError("noise fraction must lie in [0, 1)")
        return self


class OutputSection(_Section):
    dir: str = "out"
    # estimate: grayscale IWE of each window's final estimate
    images: bool = False


class RunConfig(_Section):
    run: RunSection = RunSection()
    dataset: DatasetSection = DatasetSection()
    window: WindowSection = WindowSection()
    schedule: ScheduleSection = ScheduleSection()
    optimizer: OptimizerSection = OptimizerSection()
    engine: EngineSection = EngineSection()
    synth: SynthSection = SynthSection()
    output: OutputSection = OutputSection()

    def check_paths(self, command: str) -> None:
        """Fail early, naming the config key, when an input the command reads is missing."""
        required = {
            "estimate": ["events", "calib"],
            "simulate": ["events", "calib"],
            "evaluate": ["imu"],
        }.get(command, [])
        for key in required:
            value = getattr(self.dataset, key)
            if value is None:
                raise ConfigError(f"[dataset] {key} is required for '{command}'")
            if not Path(value).exists():
                raise ConfigError(f"[dataset] {key}: file not found: {value}")
        if command == "simulate" and self.engine.energy_table and not Path(self.engine.energy_table).exists():
            raise ConfigError(f"[engine] energy_table: file not found: {self.engine.energy_table}")

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def load_run_config(path: Optional[str] = None,
                    overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> RunConfig:
    """Model defaults, then the INI file, then ``overrides`` (section -> key -> value)."""
    raw: Dict[str, Dict[str, Any]] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in parser.sections():
            raw[section] = dict(parser.items(section))
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(
            f"[{'.'.join(str(p) for p in err['loc'])}] {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from None
