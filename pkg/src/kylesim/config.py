"""Experiment configuration: flat key = value files, strictly validated.

The format is deliberately rigid (reproducibility over flexibility): one
`key = value` per line, '#' comments, unknown keys rejected, checkpoints
required to sit on the integration grid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "parse_config_text"]

_ENV_OUTPUT_ROOT = "KYLESIM_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Config rejected; carries per-field error messages."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "bernoulli"  # bernoulli | general
    r: float = 1.0
    d: float = 0.0
    p: float = 0.5
    payoff: str = "identity"
    dt: float = 1e-3
    t_end: float = 8.0
    n_paths: int = 20000
    seed: int = 42
    checkpoints: tuple = (1.0, 2.0, 4.0, 8.0)
    output_dir: str = ""
    deviation_factors: tuple = (0.0, 0.5, 2.0)
    block_paths: int = 8192

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = os.environ.get(_ENV_OUTPUT_ROOT, "runs")
        return Path(root) / f"{self.model}_r{self.r:g}_seed{self.seed}"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out


_PARSERS = {
    "model": str,
    "r": float,
    "d": float,
    "p": float,
    "payoff": str,
    "dt": float,
    "t_end": float,
    "n_paths": int,
    "seed": int,
    "checkpoints": lambda s: tuple(float(x) for x in s.split(",") if x.strip()),
    "output_dir": str,
    "deviation_factors": lambda s: tuple(float(x) for x in s.split(",") if x.strip()),
    "block_paths": int,
}


def validate(config: ExperimentConfig) -> list[str]:
    """Field-level validation; returns the list of errors (empty when valid)."""
    errors = []
    if config.model not in ("bernoulli", "general"):
        errors.append(f"model: must be 'bernoulli' or 'general', got {config.model!r}")
    if not config.r > 0.0:
        errors.append(f"r: must be positive, got {config.r}")
    if config.model == "bernoulli" and not (0.0 < config.p < 1.0):
        errors.append(f"p: must lie in (0, 1), got {config.p}")
    if not config.dt > 0.0:
        errors.append(f"dt: must be positive, got {config.dt}")
    if not config.t_end > 0.0:
        errors.append(f"t_end: must be positive, got {config.t_end}")
    if config.n_paths < 1:
        errors.append(f"n_paths: must be >= 1, got {config.n_paths}")
    if config.block_paths < 1:
        errors.append(f"block_paths: must be >= 1, got {config.block_paths}")
    if config.dt > 0.0:
        for t in config.checkpoints:
            k = round(t / config.dt)
            if t <= 0.0 or abs(k * config.dt - t) > 1e-6 * config.dt:
                errors.append(f"checkpoints: {t} is not on the dt={config.dt} grid")
            elif t > config.t_end + 1e-9:
                errors.append(f"checkpoints: {t} lies beyond t_end={config.t_end}")
    if config.model == "general":
        from .payoff import resolve_payoff, validate_payoff

        try:
            spec = resolve_payoff(config.payoff)
            check = validate_payoff(spec, config.r)
            if not check.ok:
                errors.append(f"payoff: {check.message}")
        except (ValueError, OSError) as exc:
            errors.append(f"payoff: {exc}")
    return errors


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse flat key = value text; unknown keys and bad values are errors."""
    errors = []
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _PARSERS:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in values:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as exc:
            errors.append(f"{source}:{lineno}: bad value for {key!r}: {exc}")
    if errors:
        raise ConfigError(errors)
    config = ExperimentConfig(**values)
    errors = validate(config)
    if errors:
        raise ConfigError(errors)
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), source=str(path))


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply CLI flag overrides (already-typed values), then re-validate."""
    config = replace(config, **overrides)
    errors = validate(config)
    if errors:
        raise ConfigError(errors)
    return config
