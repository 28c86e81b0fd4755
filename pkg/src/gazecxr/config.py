"""Run configuration: a TOML file validated with pydantic.

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .client import EndpointConfig
from .overlay import OverlaySpec
from .tasks import DEFAULT_CORRUPT_PROBABILITY, TaskKind

U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    def __init__(self, messages: list[str], source: str = ""):
        self.messages = messages
        prefix = f"{source}: " if source else ""
        super().__init__("\n".join(prefix + m for m in messages))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    images: Path
    gaze: Path
    reports: Path
    split: Path
    ddx_gold: Optional[Path] = None
    vqa: Optional[Path] = None
    lexicon: Optional[Path] = None
    prompts: Optional[Path] = None


class OverlayConfig(_Strict):
    color: tuple[int, int, int] = (255, 0, 0)
    dot_radius: int = Field(2, ge=0)
    alpha_max: float = Field(0.85, gt=0, le=1)
    scale: Literal["linear", "log1p"] = "linear"
    cell_size: int = Field(1, ge=1)
    sample_rate_hz: float = Field(1000.0, gt=0)

    @field_validator("color")
    @classmethod
    def _color_range(cls, v):
        if any(not 0 <= c <= 255 for c in v):
            raise ValueError("color channels must be in [0, 255]")
        return v

    def spec(self) -> OverlaySpec:
        return OverlaySpec(tuple(self.color), self.dot_radius, self.alpha_max, self.scale)


class ServicesConfig(_Strict):
    ner_url: Optional[str] = None
    embed_url: Optional[str] = None
    timeout: float = Field(30.0, gt=0)


class StrictEndpoint(EndpointConfig):
    model_config = ConfigDict(extra="forbid")


class RunConfig(_Strict):
    output_dir: Path = Path("out")
    seed: int = Field(0, ge=0, le=U64_MAX)
    tasks: list[TaskKind] = Field(default_factory=lambda: list(TaskKind), min_length=1)
    corrupt_probability: float = Field(DEFAULT_CORRUPT_PROBABILITY, ge=0, le=1)
    link_threshold: float = Field(0.85, gt=0, le=1)
    ddx_average: Literal["micro", "macro"] = "micro"
    render_workers: Optional[int] = Field(None, ge=1)
    data: DataConfig
    overlay: OverlayConfig = Field(default_factory=OverlayConfig)
    endpoint: StrictEndpoint = Field(default_factory=StrictEndpoint)
    services: ServicesConfig = Field(default_factory=ServicesConfig)

    @field_validator("tasks")
    @classmethod
    def _dedupe(cls, v):
        return sorted(set(v), key=list(TaskKind).index)

    def resolved(self, base: Path) -> "RunConfig":
        def fix(p):
            return p if p is None or p.is_absolute() else (base / p)

        data = self.data.model_copy(update={k: fix(v) for k, v in self.data if isinstance(v, Path)})
        return self.model_copy(update={"data": data, "output_dir": fix(self.output_dir)})

    def canonical(self) -> dict:
        return self.model_dump(mode="json")

    def section_hash(self, *keys: str) -> str:
        doc = self.canonical()
        part = {k: doc[k] for k in keys} if keys else doc
        return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()

    @property
    def config_hash(self) -> str:
        return self.section_hash()

    def missing_paths(self) -> list[str]:
        missing = []
        for name, value in self.data:
            if value is not None and not Path(value).exists():
                missing.append(f"data.{name}: path does not exist: {value}")
        return missing


def _format_validation(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_config(text: str, base: Path = Path("."), source: str = "") -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"syntax error: {exc}"], source) from None
    try:
        cfg = RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc), source) from None
    return cfg.resolved(base)


def load_config(path: str | Path, overrides: Optional[dict] = None, check_paths: bool = True) -> RunConfig:
    """Load, apply CLI overrides (``seed``, ``tasks``) and optionally check data paths."""
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config: {exc}"], str(path)) from None
    cfg = parse_config(text, path.parent.resolve(), str(path))
    if overrides:
        try:
            cfg = RunConfig.model_validate({**cfg.canonical(), **overrides})
        except ValidationError as exc:
            raise ConfigError(_format_validation(exc), "command line") from None
    if check_paths:
        missing = cfg.missing_paths()
        if missing:
            raise ConfigError(missing, str(path))
    return cfg
