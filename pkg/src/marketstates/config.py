"""Pipeline configuration: defaults, JSON file loading, validation and seed derivation."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .aggregate import METHODS
from .clustering import INIT_METHODS
from .relevance import BETA_SCOPES


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    prices: str | None = None
    sector_map: str | None = None
    out: str = "out"
    seed: int = 0

    min_coverage: float = 0.995
    n: int = 13
    tau: int = 40

    k: int = 8
    kmeans_tol: float = 1e-6
    kmeans_max_iter: int = 300
    kmeans_init: str = "spread"

    beta_scope: str = "members"
    method: str = "mode-mode"

    runs: int = 100
    epochs: int = 100
    width_divisor: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 32
    jobs: int = 1

    synth_days: int = 1000
    synth_tickers_per_sector: int = 3
    synth_missing_probability: float = 0.001

    def validate(self) -> "PipelineConfig":
        checks = [
            (0 < self.min_coverage <= 1, "min_coverage must lie in (0, 1]"),
            (self.n >= 2, "n must be >= 2"),
            (self.tau >= 3, "tau must be >= 3"),
            (self.k >= 2, "k must be >= 2"),
            (self.kmeans_tol >= 0, "kmeans_tol must be >= 0"),
            (self.kmeans_max_iter >= 1, "kmeans_max_iter must be >= 1"),
            (self.kmeans_init in INIT_METHODS, f"kmeans_init must be one of {INIT_METHODS}"),
            (self.beta_scope in BETA_SCOPES, f"beta_scope must be one of {BETA_SCOPES}"),
            (self.method in METHODS, f"method must be one of {METHODS}"),
            (self.runs >= 1, "runs must be >= 1"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.width_divisor >= 1, "width_divisor must be >= 1"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.jobs >= 1, "jobs must be >= 1"),
            (self.synth_days >= 2, "synth_days must be >= 2"),
            (self.synth_tickers_per_sector >= 1, "synth_tickers_per_sector must be >= 1"),
            (0 <= self.synth_missing_probability <= 0.05, "synth_missing_probability must lie in [0, 0.05]"),
            (0 <= self.seed < 2**64, "seed must fit in an unsigned 64-bit integer"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def stage_seed(self, stage: str) -> int:
        """Seed for one named stage, derived from the global seed."""
        return derive_seed(self.seed, stage)


def derive_seed(seed: int, stage: str) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def build_config(file: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then values from ``file``, then non-``None`` ``overrides``."""
    values: dict[str, Any] = {}
    known = {f.name for f in fields(PipelineConfig)}
    if file is not None:
        try:
            loaded = json.loads(Path(file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {file}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {file} must hold a JSON object")
        unknown = set(loaded) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = PipelineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if f.type in ("int", "float") and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{f.name} must be numeric, got {v!r}")
        if f.type == "int":
            if not float(v).is_integer():
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            setattr(cfg, f.name, int(v))
    return cfg.validate()


def write_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
