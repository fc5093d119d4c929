"""Seeded synthetic data: planted clusters in feature space and sector price walks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import PipelineError
from .ingest import SECTORS, PriceTable, SectorMap


@dataclass(frozen=True)
class PlantedDataset:
    features: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)
    relevant_features: tuple[int, ...]
    centers: np.ndarray  # (k, d)
    seed: int


def generate_planted(
    k: int = 8,
    n: int = 2000,
    relevant: Sequence[int] = (0, 7, 14, 20, 27, 33, 38, 42),
    separation: float = 0.4,
    noise: float = 0.05,
    seed: int = 0,
    dim: int = 45,
) -> PlantedDataset:
    """Gaussian blobs that differ only on the ``relevant`` columns.

    All columns share one baseline drawn uniformly from ``[-0.3, 0.3]``. Cluster
    ``c`` is displaced by ``separation`` along relevant column ``c mod r`` (with
    alternating sign and growing magnitude once the columns are used up), so each
    relevant column is the signature of at least one cluster when ``k >= r``.
    Every point gets isotropic noise of std ``noise``; values are clipped to
    ``[-1, 1]``. Labels are balanced and shuffled.
    """
    op = "synth.generate_planted"
    relevant = tuple(int(i) for i in relevant)
    if k < 2 or not relevant or separation <= 0 or noise < 0:
        raise PipelineError(op, "need k >= 2, a non-empty relevant set, separation > 0, noise >= 0")
    if n < k:
        raise PipelineError(op, f"n={n} cannot hold {k} non-empty clusters")
    if len(set(relevant)) != len(relevant) or not all(0 <= i < dim for i in relevant):
        raise PipelineError(op, "relevant columns must be distinct indices below dim")
    rng = np.random.default_rng(seed)
    baseline = rng.uniform(-0.3, 0.3, size=dim)
    centers = np.tile(baseline, (k, 1))
    r = len(relevant)
    for c in range(k):
        lap = c // r
        sign = 1.0 if lap % 2 == 0 else -1.0
        centers[c, relevant[c % r]] += sign * separation * (lap // 2 + 1)
    labels = rng.permutation(np.arange(n) % k)
    features = centers[labels] + rng.normal(0.0, noise, size=(n, dim))
    np.clip(features, -1.0, 1.0, out=features)
    return PlantedDataset(features, labels, relevant, centers, seed)


def default_sector_correlation(d: int = len(SECTORS), market: float = 0.5) -> np.ndarray:
    out = np.full((d, d), market)
    np.fill_diagonal(out, 1.0)
    return out


@dataclass
class SyntheticPriceConfig:
    tickers_per_sector: int = 3
    days: int = 1000
    drift: float | Sequence[float] = 0.0003
    volatility: float | Sequence[float] = 0.012
    sector_correlation: np.ndarray = field(default_factory=default_sector_correlation)
    common_weight: float | Sequence[float] = 0.7
    missing_probability: float = 0.001
    seed: int = 0
    start_date: str = "2000-01-03"

    def validate(self, d: int = len(SECTORS)) -> None:
        op = "synth.SyntheticPriceConfig"
        for name in ("drift", "volatility", "common_weight"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (d,))
            if not np.all(np.isfinite(arr)):
                raise PipelineError(op, f"{name} must be finite")
        if np.any(np.asarray(self.volatility) <= 0):
            raise PipelineError(op, "volatility must be > 0")
        w = np.asarray(self.common_weight)
        if np.any((w < 0) | (w > 1)):
            raise PipelineError(op, "common_weight must lie in [0, 1]")
        if not 0 <= self.missing_probability <= 0.05:
            raise PipelineError(op, "missing_probability must lie in [0, 0.05]")
        if self.tickers_per_sector < 1 or self.days < 2:
            raise PipelineError(op, "need at least one ticker per sector and two days")
        corr = np.asarray(self.sector_correlation, dtype=float)
        if corr.shape != (d, d) or not np.allclose(corr, corr.T) or np.linalg.eigvalsh(corr).min() < -1e-10:
            raise PipelineError(op, f"sector_correlation must be a {d}x{d} PSD correlation matrix")


def _sqrt_psd(corr: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(corr)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def generate_prices(config: SyntheticPriceConfig | None = None) -> tuple[PriceTable, SectorMap]:
    """Geometric random walks per ticker with correlated sector-level shocks.

    Each ticker's log return is ``drift + vol * (sqrt(w) z_sector + sqrt(1 - w) e)``
    with ``z`` drawn jointly from ``sector_correlation`` and ``e`` idiosyncratic.
    Cells are then blanked independently with ``missing_probability``.
    """
    config = config or SyntheticPriceConfig()
    sectors = SECTORS
    d = len(sectors)
    config.validate(d)
    rng = np.random.default_rng(config.seed)
    per = config.tickers_per_sector
    steps = config.days - 1
    drift = np.broadcast_to(np.asarray(config.drift, float), (d,))
    vol = np.broadcast_to(np.asarray(config.volatility, float), (d,))
    w = np.broadcast_to(np.asarray(config.common_weight, float), (d,))

    z = rng.standard_normal((steps, d)) @ _sqrt_psd(np.asarray(config.sector_correlation, float)).T
    sector_of = np.repeat(np.arange(d), per)
    eps = rng.standard_normal((steps, d * per))
    shocks = np.sqrt(w[sector_of]) * z[:, sector_of] + np.sqrt(1 - w[sector_of]) * eps
    log_ret = drift[sector_of] + vol[sector_of] * shocks
    start = rng.uniform(10.0, 200.0, size=d * per)
    log_prices = np.vstack([np.zeros(d * per), np.cumsum(log_ret, axis=0)]) + np.log(start)
    prices = np.exp(log_prices)
    if config.missing_probability > 0:
        prices[rng.random(prices.shape) < config.missing_probability] = np.nan

    tickers = tuple(f"{s}{i:02d}" for s in sectors for i in range(per))
    dates = np.busday_offset(np.datetime64(config.start_date, "D"), np.arange(config.days), roll="forward")
    sector_map = SectorMap({t: sectors[s] for t, s in zip(tickers, sector_of)})
    return PriceTable(dates, tickers, prices), sector_map


def brute_force_assign(centroids, vector) -> int:
    """Reference nearest-centroid rule by explicit loops; lowest id wins ties."""
    best, best_d = 0, None
    for idx, c in enumerate(centroids):
        if len(c) != len(vector):
            raise PipelineError("synth.brute_force_assign", "dimension mismatch")
        dist = sum((float(a) - float(b)) ** 2 for a, b in zip(vector, c))
        if best_d is None or dist < best_d:
            best, best_d = idx, dist
    return best
