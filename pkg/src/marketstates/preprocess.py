"""Local normalisation of returns and rolling sector correlation matrices."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .errors import PipelineError
from .ingest import SECTORS, ReturnTable, _format_dates, _parse_dates

# A window is treated as constant when its std is this small relative to its values.
_ZERO_STD_RTOL = 1e-12


@dataclass(frozen=True)
class NormalizedReturnTable:
    dates: np.ndarray
    sectors: tuple[str, ...]
    values: np.ndarray
    n: int


@dataclass(frozen=True)
class CorrelationMatrix:
    date: np.datetime64
    entries: np.ndarray
    tau: int


@dataclass(frozen=True)
class FeatureVector:
    date: np.datetime64
    values: np.ndarray


def pair_index(sectors: Sequence[str] = SECTORS) -> list[tuple[int, int]]:
    """Row-major upper-triangle pairs ``(i, j)``, ``i < j``."""
    d = len(sectors)
    return [(i, j) for i in range(d) for j in range(i + 1, d)]


def feature_names(sectors: Sequence[str] = SECTORS) -> list[str]:
    """Column names ``E_M, E_F, ..., I_HC`` matching :func:`flatten` order."""
    return [f"{sectors[i]}_{sectors[j]}" for i, j in pair_index(sectors)]


def _check_spread(std: np.ndarray, scale: np.ndarray, dates: np.ndarray, sectors, op: str):
    flat = (std == 0) | (std <= _ZERO_STD_RTOL * scale)
    if flat.any():
        row, col = np.argwhere(flat)[0]
        raise PipelineError(
            op,
            f"zero variance in window ending {dates[row]} for sector {sectors[col]!r}",
        )


def local_normalize(returns: ReturnTable, n: int = 13) -> NormalizedReturnTable:
    """Standardise each return by the mean and std of its trailing ``n``-day window.

    The window ending at row ``t`` covers rows ``t-n+1 .. t`` and includes ``R_t``
    itself; std is the population (divide-by-``n``) value. The first ``n-1`` rows
    have no full window and are dropped.
    """
    op = "preprocess.local_normalize"
    if n < 2:
        raise PipelineError(op, f"window n must be >= 2, got {n}")
    R = np.asarray(returns.returns, dtype=float)
    if len(R) < n:
        raise PipelineError(op, f"need at least {n} return rows, got {len(R)}")
    windows = sliding_window_view(R, n, axis=0)  # (T-n+1, d, n)
    mean = windows.mean(axis=-1)
    std = np.sqrt(((windows - mean[..., None]) ** 2).mean(axis=-1))
    dates = returns.dates[n - 1:]
    _check_spread(std, np.abs(windows).max(axis=-1), dates, returns.sectors, op)
    values = (R[n - 1:] - mean) / std
    return NormalizedReturnTable(dates, returns.sectors, values, n)


def rolling_correlation(norm: NormalizedReturnTable, tau: int = 40) -> list[CorrelationMatrix]:
    """Pearson correlation matrices over trailing ``tau``-row windows, stride 1.

    Each matrix is dated by the last row of its window. Outputs are exactly
    symmetric with a unit diagonal.
    """
    stack = correlation_stack(norm.values, tau, norm.dates, norm.sectors)
    dates = norm.dates[tau - 1:]
    return [CorrelationMatrix(d, m, tau) for d, m in zip(dates, stack)]


def correlation_stack(values: np.ndarray, tau: int, dates=None, sectors=None) -> np.ndarray:
    """Array form of :func:`rolling_correlation`: shape ``(T - tau + 1, d, d)``."""
    op = "preprocess.rolling_correlation"
    if tau < 3:
        raise PipelineError(op, f"window tau must be >= 3, got {tau}")
    x = np.asarray(values, dtype=float)
    if len(x) < tau:
        raise PipelineError(op, f"need at least {tau} normalised rows, got {len(x)}")
    if dates is None:
        dates = np.arange(len(x))
    if sectors is None:
        sectors = [str(i) for i in range(x.shape[1])]
    windows = sliding_window_view(x, tau, axis=0)  # (W, d, tau)
    centred = windows - windows.mean(axis=-1, keepdims=True)
    cov = np.einsum("wit,wjt->wij", centred, centred) / tau
    std = np.sqrt(np.einsum("wii->wi", cov))
    _check_spread(std, np.abs(windows).max(axis=-1), dates[tau - 1:], sectors, op)
    corr = cov / (std[:, :, None] * std[:, None, :])
    corr = 0.5 * (corr + np.swapaxes(corr, 1, 2))
    np.clip(corr, -1.0, 1.0, out=corr)
    idx = np.arange(x.shape[1])
    corr[:, idx, idx] = 1.0
    return corr


def flatten(matrix: CorrelationMatrix) -> FeatureVector:
    iu = np.triu_indices(matrix.entries.shape[0], k=1)
    return FeatureVector(matrix.date, matrix.entries[iu].copy())


def unflatten(values: np.ndarray, d: int | None = None) -> np.ndarray:
    """Rebuild the symmetric unit-diagonal matrix from a flattened upper triangle."""
    values = np.asarray(values, dtype=float)
    if d is None:
        d = int(round((1 + np.sqrt(1 + 8 * len(values))) / 2))
    if d * (d - 1) // 2 != len(values):
        raise PipelineError("preprocess.unflatten", f"{len(values)} values do not form an upper triangle")
    out = np.eye(d)
    iu = np.triu_indices(d, k=1)
    out[iu] = values
    out[(iu[1], iu[0])] = values
    return out


@dataclass(frozen=True)
class FeatureTable:
    """All feature vectors of a run as one matrix, rows ordered by date."""

    dates: np.ndarray
    names: tuple[str, ...]
    values: np.ndarray

    def __len__(self):
        return len(self.dates)

    def vectors(self) -> list[FeatureVector]:
        return [FeatureVector(d, v) for d, v in zip(self.dates, self.values)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.names))
        frame.insert(0, "date", _format_dates(self.dates))
        return frame


def feature_table(returns: ReturnTable, n: int = 13, tau: int = 40) -> FeatureTable:
    """Returns -> normalised returns -> rolling correlations -> flattened features."""
    norm = local_normalize(returns, n)
    stack = correlation_stack(norm.values, tau, norm.dates, norm.sectors)
    iu = np.triu_indices(len(norm.sectors), k=1)
    return FeatureTable(
        norm.dates[tau - 1:],
        tuple(feature_names(norm.sectors)),
        np.ascontiguousarray(stack[:, iu[0], iu[1]]),
    )


def write_features(table: FeatureTable, path: str | Path) -> None:
    table.to_frame().to_csv(path, index=False)


def load_features(path: str | Path) -> FeatureTable:
    op = "preprocess.load_features"
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise PipelineError(op, f"cannot read {path}: {exc}") from None
    if len(frame.columns) < 2 or frame.columns[0] != "date":
        raise PipelineError(op, f"malformed header in {path}")
    return FeatureTable(
        _parse_dates(frame["date"], op),
        tuple(frame.columns[1:]),
        frame.iloc[:, 1:].to_numpy(dtype=float),
    )
