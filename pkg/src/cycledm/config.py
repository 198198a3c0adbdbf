"""Flat, typed key-value run configuration.

Config files hold ``key = value`` lines (``#`` comments allowed). Every key
has a schema entry with a type, a default, and help text; unknown keys are
rejected and validation reports every offending key at once. The resolved
config serializes back to text in schema order, which is what run manifests
embed.

Defaults are desk-scale so the quickstart chain finishes in minutes on a
laptop; the bundled ``paper`` preset switches the schedule and batch sizes
to full-scale values.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Validation failure; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class Field:
    type: type
    default: Any
    help: str
    choices: tuple | None = None


SCHEMA: dict[str, Field] = {
    "seed": Field(int, 0, "root seed; every RNG stream is derived from it"),
    # data
    "data.source": Field(str, "synthetic", "where training data comes from", ("synthetic", "directory")),
    "data.root": Field(str, "", "directory with hw/ and mp/ glyph trees (source=directory)"),
    "data.resolution": Field(int, 32, "square image size in pixels"),
    "data.train_fraction": Field(float, 0.7, "per-class train split fraction"),
    # synthetic generator
    "synth.per_class": Field(int, 20, "synthetic images per class per domain"),
    "synth.jitter": Field(float, 1.5, "hw stroke interior jitter, px"),
    "synth.wobble": Field(float, 0.8, "hw stroke endpoint wobble, px"),
    "synth.hw_stroke_width": Field(int, 2, "hw base stroke width, px"),
    "synth.mp_stroke_width": Field(int, 2, "mp stroke width, px"),
    "synth.serifs": Field(bool, True, "draw serifs in the mp domain"),
    # schedule
    "schedule.steps": Field(int, 100, "diffusion step count T"),
    "schedule.beta_start": Field(float, 1e-3, "variance at t=1"),
    "schedule.beta_end": Field(float, 0.2, "variance at t=T"),
    # denoiser training
    "ddpm.steps": Field(int, 1500, "denoiser optimizer steps"),
    "ddpm.batch_size": Field(int, 16, "denoiser batch size"),
    "ddpm.lr": Field(float, 2e-3, "denoiser Adam learning rate"),
    "ddpm.null_rate": Field(float, 0.1, "probability of training with the null class token"),
    "ddpm.base_channels": Field(int, 16, "denoiser U-Net width"),
    "ddpm.emb_dim": Field(int, 48, "denoiser conditioning embedding width"),
    "ddpm.joint_model": Field(bool, True, "one domain-conditioned denoiser (false: one per domain)"),
    # conversion training
    "conversion.t_star": Field(int, 50, "timestep the conversion networks bridge at"),
    "conversion.epochs": Field(int, 30, "conversion training epochs"),
    "conversion.batch_size": Field(int, 16, "conversion batch size"),
    "conversion.lr": Field(float, 2e-4, "conversion Adam learning rate"),
    "conversion.base_channels": Field(int, 16, "conversion network width"),
    "conversion.lambda_cycle": Field(float, 2.0, "cycle-consistency weight"),
    "conversion.lambda_identity": Field(float, 1.0, "identity-loss weight"),
    "conversion.gp_weight": Field(float, 10.0, "discriminator gradient-penalty weight"),
    # evaluation
    "eval.k": Field(int, 3, "neighborhood size for precision/recall"),
    "eval.embed_dim": Field(int, 32, "feature extractor embedding width"),
    "eval.epochs": Field(int, 8, "feature extractor training epochs"),
    "eval.batch_size": Field(int, 64, "feature extractor batch size"),
    "eval.lr": Field(float, 2e-3, "feature extractor learning rate"),
}


class RunConfig:
    """Resolved configuration: every schema key bound to a typed value."""

    def __init__(self, values: dict[str, Any]):
        missing = set(SCHEMA) - set(values)
        extra = set(values) - set(SCHEMA)
        if missing or extra:
            raise ConfigError([f"missing key: {k}" for k in sorted(missing)]
                              + [f"unknown key: {k}" for k in sorted(extra)])
        self._values = dict(values)

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def items(self):
        return ((k, self._values[k]) for k in SCHEMA)

    def as_text(self) -> str:
        lines = [f"{k} = {format_value(v)}" for k, v in self.items()]
        return "\n".join(lines) + "\n"


def format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw: str, problems: list[str]) -> Any:
    field = SCHEMA[key]
    raw = raw.strip()
    try:
        if field.type is bool:
            if raw.lower() in ("true", "1", "yes"):
                value = True
            elif raw.lower() in ("false", "0", "no"):
                value = False
            else:
                raise ValueError(f"not a boolean: {raw!r}")
        elif field.type is int:
            value = int(raw)
        elif field.type is float:
            value = float(raw)
        else:
            value = raw
    except ValueError as exc:
        problems.append(f"{key}: {exc}")
        return field.default
    if field.choices and value not in field.choices:
        problems.append(f"{key}: {value!r} not one of {field.choices}")
    return value


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Read raw ``key = value`` pairs; duplicate keys are an error."""
    raw: dict[str, str] = {}
    problems: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            problems.append(f"{origin}:{lineno}: not a 'key = value' line: {line.strip()!r}")
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            problems.append(f"{origin}:{lineno}: duplicate key {key}")
        raw[key] = value
    if problems:
        raise ConfigError(problems)
    return raw


def preset_path(name: str) -> Path:
    path = resources.files("cycledm").joinpath("presets", f"{name}.cfg")
    return Path(str(path))


def resolve_config(config: str | Path | None = None,
                   overrides: list[str] | None = None,
                   seed: int | None = None) -> RunConfig:
    """Merge defaults, an optional config file or preset name, ``--set``
    overrides, and an optional seed override into a validated RunConfig.

    All problems (unknown keys, type errors, range violations) are collected
    and reported together.
    """
    raw: dict[str, str] = {}
    if config is not None:
        path = Path(config)
        if not path.exists() and not str(config).endswith(".cfg") and "/" not in str(config):
            candidate = preset_path(str(config))
            if candidate.exists():
                path = candidate
        if not path.exists():
            raise ConfigError([f"config file not found: {config}"])
        raw.update(parse_config_text(path.read_text(), origin=str(path)))

    problems: list[str] = []
    for item in overrides or []:
        if "=" not in item:
            problems.append(f"--set needs key=value, got {item!r}")
            continue
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    unknown = [k for k in raw if k not in SCHEMA]
    problems.extend(f"unknown key: {k}" for k in sorted(unknown))

    values = {k: f.default for k, f in SCHEMA.items()}
    for key, raw_value in raw.items():
        if key in SCHEMA:
            values[key] = _parse_value(key, raw_value, problems)
    if seed is not None:
        values["seed"] = int(seed)

    problems.extend(_cross_validate(values))
    if problems:
        raise ConfigError(problems)
    return RunConfig(values)


def _cross_validate(v: dict[str, Any]) -> list[str]:
    problems = []
    if v["schedule.steps"] < 1:
        problems.append("schedule.steps: must be >= 1")
    if not 0.0 < v["schedule.beta_start"] <= v["schedule.beta_end"] < 1.0:
        problems.append("schedule.beta_start/beta_end: need 0 < start <= end < 1")
    if not 0.0 < v["data.train_fraction"] < 1.0:
        problems.append("data.train_fraction: must lie in (0, 1)")
    if not 1 <= v["conversion.t_star"] <= v["schedule.steps"]:
        problems.append(f"conversion.t_star: {v['conversion.t_star']} outside "
                        f"[1, {v['schedule.steps']}] (schedule.steps)")
    if v["data.source"] == "directory" and not v["data.root"]:
        problems.append("data.root: required when data.source = directory")
    if not 0.0 <= v["ddpm.null_rate"] <= 1.0:
        problems.append("ddpm.null_rate: must lie in [0, 1]")
    for key in ("conversion.lambda_cycle", "conversion.lambda_identity", "conversion.gp_weight"):
        if v[key] < 0:
            problems.append(f"{key}: must be >= 0")
    for key in ("data.resolution", "synth.per_class", "ddpm.steps", "ddpm.batch_size",
                "conversion.epochs", "conversion.batch_size", "eval.k", "eval.epochs",
                "eval.batch_size", "ddpm.base_channels", "conversion.base_channels",
                "eval.embed_dim", "ddpm.emb_dim"):
        if v[key] < 1:
            problems.append(f"{key}: must be >= 1")
    if v["data.resolution"] < 8:
        problems.append("data.resolution: must be >= 8")
    return problems
