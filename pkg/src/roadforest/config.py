"""Plain-text ``key=value`` run configuration."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

from .forest import ForestConfig
from .pipeline import DEFAULT_SCALES, validate_scales
from .svm import SvmConfig

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "load_config"]


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "yes", "1"):
        return True
    if t in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _parse_scales(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    return validate_scales(int(p) for p in parts)


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str = ""
    kernel_bank: str = ""
    scales: tuple[int, ...] = DEFAULT_SCALES
    trees: int = 10
    depth: int = 10
    candidates: int = 10
    min_samples_leaf: int = 10
    svm_c: float = 0.5
    seed: int = 0
    output_dir: str = "model"
    threads: int = 0  # 0 = all logical cores
    prior: bool = True

    def __post_init__(self):
        for name in ("trees", "depth", "candidates", "min_samples_leaf"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.svm_c > 0:
            raise ConfigError("svm_c must be positive")
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def forest_config(self) -> ForestConfig:
        return ForestConfig(
            num_trees=self.trees,
            max_depth=self.depth,
            num_candidates=self.candidates,
            min_samples_leaf=self.min_samples_leaf,
            seed=self.seed,
            svm=SvmConfig(C=self.svm_c),
        )

    def worker_threads(self) -> int:
        return self.threads or os.cpu_count() or 1

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if key == "scales":
                value = ",".join(str(s) for s in value)
            elif key == "prior":
                value = "on" if value else "off"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict[str, str]) -> RunConfig:
        return _build({**_raw(self), **overrides})


_PARSERS = {
    "dataset_root": str,
    "kernel_bank": str,
    "scales": _parse_scales,
    "trees": int,
    "depth": int,
    "candidates": int,
    "min_samples_leaf": int,
    "svm_c": float,
    "seed": int,
    "output_dir": str,
    "threads": int,
    "prior": _parse_bool,
}
KEYS = tuple(f.name for f in fields(RunConfig))


def _raw(cfg: RunConfig) -> dict[str, str]:
    return dict(line.split("=", 1) for line in cfg.to_text().splitlines())


def _build(raw: dict[str, str]) -> RunConfig:
    values = {}
    for key, text in raw.items():
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _PARSERS[key](text.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return RunConfig(**values)


def parse_config_text(text: str) -> RunConfig:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        key, value = line.split("=", 1)
        raw[key.strip()] = value.strip()
    return _build(raw)


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())
