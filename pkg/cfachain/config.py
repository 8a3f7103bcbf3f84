"""
Pipeline Configuration
Validated stage parameters, INI-style config files and the named comparison variants
"""
import configparser
from pathlib import Path
from typing import Any, Dict, Iterable, Literal, Optional, Union

from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .cfa_io import BayerPattern
from .errors import ConfigError


class FlowParams(BaseModel):
    """TV-L1 parameters; defaults are the reference values of the duality-based scheme"""

    lambda_: float = Field(0.15, gt=0, alias="lambda")
    theta: float = Field(0.3, gt=0)
    tau: float = Field(0.25, gt=0)
    warps: int = Field(5, gt=0)
    pyramid_scales: int = Field(5, gt=0)
    scale_factor: float = Field(0.5, gt=0, lt=1)
    inner_iterations: int = Field(50, gt=0)
    epsilon: float = Field(0.01, gt=0)
    registration: Literal["tvl1", "global"] = "tvl1"

    model_config = ConfigDict(populate_by_name=True, extra="forbid")


class OcclusionParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tau_div: float = Field(0.5, gt=0)
    # multiples of the stabilized noise std
    tau_color_factor: float = Field(3.0, gt=0)
    # Gaussian std on the flow before the divergence test, in pixels
    flow_smoothing: float = Field(1.5, ge=0)
    # side of the opening that drops isolated divergence flags; 1 disables
    min_region: int = Field(3, ge=1)


class DenoiseParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    side: int = Field(8, gt=0)
    k: int = Field(16, ge=1)
    search_radius: int = Field(21, ge=0)
    stride: Optional[int] = Field(None, gt=0)
    tau: Optional[float] = Field(None, gt=0)
    sigma: float = Field(1.0, ge=0)
    # None = the whole sequence
    temporal_radius: Optional[int] = Field(None, ge=0)

    @property
    def step(self) -> int:
        return self.stride or max(1, self.side // 2)


class InterpConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    side: int = Field(8, gt=0)
    k: int = Field(8, ge=1)
    search_radius: int = Field(15, ge=0)
    stride: Optional[int] = Field(None, gt=0)
    h: Optional[float] = Field(None, gt=0)
    h_factor: float = Field(2.0, gt=0)
    residual_sigma: float = Field(1.0, gt=0)

    @property
    def step(self) -> int:
        return self.stride or max(1, self.side // 2)


class NoiseSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["auto", "fixed"] = "auto"
    sigma: float = Field(5.0, ge=0)
    bins: int = Field(16, ge=2)
    c: Optional[float] = Field(None, gt=0)


class StageFlags(BaseModel):
    """The directional demosaick always runs; these toggle the optional stages around it"""

    model_config = ConfigDict(extra="forbid")

    denoise: bool = True
    demosaick_st: bool = True
    imaging_chain: bool = False


class ImagingChainSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.5, gt=0)
    white_balance: bool = True


class PipelineConfig(BaseSettings):
    """
    Complete pipeline configuration

    Values come from (highest first) explicit arguments, CFACHAIN_* environment
    variables, a .env file, then defaults.
    """

    model_config = SettingsConfigDict(
        env_prefix="CFACHAIN_",
        env_nested_delimiter="__",
        env_file=".env",
        extra="ignore",
    )

    # unset until given by --pattern or [pipeline] pattern
    pattern: Optional[BayerPattern] = None
    # sensor saturation level when below the container maximum, e.g. 4095 for 12-bit data
    white_level: Optional[float] = Field(None, gt=0)
    seed: int = 0
    workers: int = Field(0, ge=0)
    stages: StageFlags = StageFlags()
    noise: NoiseSettings = NoiseSettings()
    flow: FlowParams = FlowParams()
    occlusion: OcclusionParams = OcclusionParams()
    denoise: DenoiseParams = DenoiseParams()
    interp: InterpConfig = InterpConfig()
    imaging: ImagingChainSettings = ImagingChainSettings()

    @field_validator("pattern", mode="before")
    @classmethod
    def _parse_pattern(cls, value: Any) -> Optional[BayerPattern]:
        return None if value is None else BayerPattern.parse(value)

    def with_stages(self, **flags: bool) -> "PipelineConfig":
        return self.model_copy(update={"stages": self.stages.model_copy(update=flags)})


VARIANTS: Dict[str, Dict[str, bool]] = {
    "single_image_dem": {"denoise": False, "demosaick_st": False},
    "proposed_dem": {"denoise": False, "demosaick_st": True},
    "den_local_dem": {"denoise": True, "demosaick_st": False},
    "proposed_chain": {"denoise": True, "demosaick_st": True},
}

SECTIONS = ("noise", "flow", "occlusion", "denoise", "interp", "imaging", "stages")


def _coerce(raw: str) -> Any:
    text = raw.strip()
    lowered = text.lower()
    if lowered in ("none", ""):
        return None
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def build_config(data: Dict[str, Any]) -> PipelineConfig:
    # the settings model ignores stray environment entries; explicit keys must be known
    unknown = sorted(set(data) - set(PipelineConfig.model_fields))
    if unknown:
        raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")
    try:
        return PipelineConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Iterable[str]] = None) -> PipelineConfig:
    """
    Read an INI config ([pipeline] plus one section per stage) and apply overrides

    Args:
        path: config file, or None for defaults
        overrides: "section.key=value" strings, e.g. "denoise.k=24"

    Returns:
        Validated PipelineConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"Cannot read config file {path}")
        for section in parser.sections():
            values = {key: _coerce(value) for key, value in parser.items(section)}
            if section == "pipeline":
                data.update(values)
            elif section in SECTIONS:
                data.setdefault(section, {}).update(values)
            else:
                raise ConfigError(f"Unknown config section [{section}]")
        logger.debug(f"Loaded config from {path}")

    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"Override '{item}' is not key=value")
        key, value = item.split("=", 1)
        section, _, name = key.strip().rpartition(".")
        if section:
            data.setdefault(section, {})[name] = _coerce(value)
        else:
            data[name] = _coerce(value)
    return build_config(data)


def dump_config(cfg: PipelineConfig) -> str:
    """Render a config in the same INI layout load_config reads"""
    parser = configparser.ConfigParser()
    top = cfg.model_dump(by_alias=True, mode="json")
    parser["pipeline"] = {
        key: str(value) for key, value in top.items() if key not in SECTIONS
    }
    for section in SECTIONS:
        parser[section] = {key: str(value) for key, value in top[section].items()}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser[section].items())
        lines.append("")
    return "\n".join(lines)
