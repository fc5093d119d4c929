"""Price loading, coverage filtering, gap filling, sector aggregation and returns."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import PipelineError

SECTORS: tuple[str, ...] = ("E", "M", "F", "CS", "CD", "U", "T", "IT", "I", "HC")
SECTOR_NAMES: dict[str, str] = {
    "E": "Energy",
    "M": "Materials",
    "F": "Financial Services",
    "CS": "Consumer Staples",
    "CD": "Consumer Discretionary",
    "U": "Utilities",
    "T": "Telecommunication Services",
    "IT": "Information Technology",
    "I": "Industrials",
    "HC": "Health Care",
}


@dataclass(frozen=True)
class PriceTable:
    """Per-ticker closing prices; ``NaN`` marks a missing cell."""

    dates: np.ndarray  # datetime64[D], strictly increasing
    tickers: tuple[str, ...]
    prices: np.ndarray  # (len(dates), len(tickers)) float64

    def __post_init__(self):
        if self.prices.shape != (len(self.dates), len(self.tickers)):
            raise PipelineError(
                "ingest.PriceTable",
                f"prices shape {self.prices.shape} does not match "
                f"{len(self.dates)} dates x {len(self.tickers)} tickers",
            )
        if len(self.dates) > 1 and not np.all(np.diff(self.dates) > np.timedelta64(0, "D")):
            raise PipelineError("ingest.PriceTable", "dates must be strictly increasing")
        present = self.prices[~np.isnan(self.prices)]
        if np.any(present <= 0):
            raise PipelineError("ingest.PriceTable", "present prices must be > 0")

    def coverage(self) -> np.ndarray:
        """Fraction of non-missing cells per ticker."""
        return np.mean(~np.isnan(self.prices), axis=0)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.prices, columns=list(self.tickers))
        frame.insert(0, "date", _format_dates(self.dates))
        return frame


@dataclass(frozen=True)
class SectorMap:
    assignments: Mapping[str, str]
    sectors: tuple[str, ...] = SECTORS

    def __post_init__(self):
        bad = {t: s for t, s in self.assignments.items() if s not in self.sectors}
        if bad:
            ticker, sector = next(iter(bad.items()))
            raise PipelineError(
                "ingest.SectorMap", f"ticker {ticker!r} mapped to unknown sector {sector!r}"
            )


@dataclass(frozen=True)
class SectorPriceTable:
    dates: np.ndarray
    sectors: tuple[str, ...]
    prices: np.ndarray  # (len(dates), len(sectors)), complete and > 0

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.prices, columns=list(self.sectors))
        frame.insert(0, "date", _format_dates(self.dates))
        return frame


@dataclass(frozen=True)
class ReturnTable:
    """Simple returns, one row fewer than the price table they came from.

    Row ``t`` holds ``(S[t+1] - S[t]) / S[t]`` and is dated ``dates[t+1]`` of the
    price table, the day the return becomes known.
    """

    dates: np.ndarray
    sectors: tuple[str, ...]
    returns: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.returns, columns=list(self.sectors))
        frame.insert(0, "date", _format_dates(self.dates))
        return frame


def _format_dates(dates: np.ndarray) -> list[str]:
    return [str(d) for d in np.asarray(dates, dtype="datetime64[D]")]


def _parse_dates(values: Sequence[str], operation: str) -> np.ndarray:
    try:
        parsed = pd.to_datetime(pd.Series(values), format="%Y-%m-%d")
    except (ValueError, TypeError) as exc:
        raise PipelineError(operation, f"unparsable date column: {exc}") from None
    return parsed.to_numpy().astype("datetime64[D]")


def _parse_price(cell: str) -> float:
    # float() is correctly rounded; pandas' fast parser is not
    try:
        return float(cell)
    except ValueError:
        return np.nan


def load_prices(path: str | Path) -> PriceTable:
    """Read a price CSV (``date`` column followed by one column per ticker).

    Rows are sorted by date. Cells that are empty or do not parse as numbers become
    missing; duplicate dates are rejected.

    Raises:
        PipelineError: unreadable file, header without a leading ``date`` column,
            duplicate dates, no ticker columns, or a non-positive price.
    """
    op = "ingest.load_prices"
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise PipelineError(op, f"cannot read {path}: {exc}") from None
    if len(raw.columns) == 0 or raw.columns[0] != "date":
        raise PipelineError(op, f"malformed header in {path}: first column must be 'date'")
    tickers = tuple(str(c) for c in raw.columns[1:])
    if not tickers:
        raise PipelineError(op, f"zero tickers in {path}")
    if len(set(tickers)) != len(tickers):
        raise PipelineError(op, f"malformed header in {path}: repeated ticker column")
    dates = _parse_dates(raw["date"].str.strip(), op)
    if len(np.unique(dates)) != len(dates):
        raise PipelineError(op, f"duplicate dates in {path}")
    prices = raw.iloc[:, 1:].map(_parse_price).to_numpy(dtype=float)
    prices[~np.isfinite(prices)] = np.nan
    order = np.argsort(dates, kind="stable")
    try:
        return PriceTable(dates[order], tickers, prices[order])
    except PipelineError as exc:
        raise PipelineError(op, exc.detail) from None


def write_prices(table: PriceTable, path: str | Path) -> None:
    table.to_frame().to_csv(path, index=False, na_rep="")


def load_sector_map(path: str | Path) -> SectorMap:
    """Read a two-column ``ticker,sector`` CSV."""
    op = "ingest.load_sector_map"
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise PipelineError(op, f"cannot read {path}: {exc}") from None
    if list(raw.columns) != ["ticker", "sector"]:
        raise PipelineError(op, f"malformed header in {path}: expected 'ticker,sector'")
    tickers = raw["ticker"].str.strip()
    if tickers.duplicated().any():
        dup = tickers[tickers.duplicated()].iloc[0]
        raise PipelineError(op, f"ticker {dup!r} listed more than once")
    try:
        return SectorMap(dict(zip(tickers, raw["sector"].str.strip())))
    except PipelineError as exc:
        raise PipelineError(op, exc.detail) from None


def write_sector_map(sector_map: SectorMap, path: str | Path) -> None:
    pd.DataFrame(
        {"ticker": list(sector_map.assignments), "sector": list(sector_map.assignments.values())}
    ).to_csv(path, index=False)


def filter_coverage(table: PriceTable, min_coverage: float = 0.995) -> PriceTable:
    """Keep the tickers whose share of non-missing days is at least ``min_coverage``."""
    if not 0 < min_coverage <= 1:
        raise PipelineError("ingest.filter_coverage", f"min_coverage must be in (0, 1], got {min_coverage}")
    keep = table.coverage() >= min_coverage
    if not keep.any():
        raise PipelineError("ingest.filter_coverage", "empty table after filtering")
    return PriceTable(
        table.dates,
        tuple(t for t, k in zip(table.tickers, keep) if k),
        table.prices[:, keep],
    )


def interpolate_missing(table: PriceTable) -> PriceTable:
    """Fill gaps linearly along the trading-day index.

    Interior gaps are linear in the row index (not calendar time); leading and
    trailing gaps take the nearest present value.
    """
    filled = table.prices.copy()
    index = np.arange(len(table.dates), dtype=float)
    for col, ticker in enumerate(table.tickers):
        series = filled[:, col]
        present = ~np.isnan(series)
        if present.sum() < 2:
            raise PipelineError(
                "ingest.interpolate_missing",
                f"ticker {ticker!r} has fewer than 2 present prices",
            )
        if present.all():
            continue
        gaps = ~present
        # np.interp clamps to the end values outside the sampled range
        series[gaps] = np.interp(index[gaps], index[present], series[present])
    return PriceTable(table.dates, table.tickers, filled)


def aggregate_sectors(table: PriceTable, sector_map: SectorMap) -> SectorPriceTable:
    """Sum member prices per sector (the value of holding one share of each member)."""
    op = "ingest.aggregate_sectors"
    if np.isnan(table.prices).any():
        raise PipelineError(op, "table still has missing prices; interpolate first")
    columns = {s: [] for s in sector_map.sectors}
    for col, ticker in enumerate(table.tickers):
        sector = sector_map.assignments.get(ticker)
        if sector is None:
            raise PipelineError(op, f"unmapped ticker {ticker!r}")
        columns[sector].append(col)
    empty = [s for s, members in columns.items() if not members]
    if empty:
        raise PipelineError(op, f"empty sector {empty[0]!r}: no tickers in the table map to it")
    # sum in ticker-name order so the result does not depend on column order
    prices = np.column_stack(
        [
            table.prices[:, sorted(members, key=lambda c: table.tickers[c])].sum(axis=1)
            for members in columns.values()
        ]
    )
    return SectorPriceTable(table.dates, tuple(sector_map.sectors), prices)


def compute_returns(table: SectorPriceTable) -> ReturnTable:
    if len(table.dates) < 2:
        raise PipelineError("ingest.compute_returns", "need at least 2 dates to form returns")
    if np.any(table.prices <= 0):
        raise PipelineError("ingest.compute_returns", "sector prices must be > 0")
    s = table.prices
    return ReturnTable(table.dates[1:], table.sectors, (s[1:] - s[:-1]) / s[:-1])


def load_returns(path: str | Path) -> ReturnTable:
    frame = pd.read_csv(path, float_precision="round_trip")
    if frame.columns[0] != "date":
        raise PipelineError("ingest.load_returns", f"malformed header in {path}")
    return ReturnTable(
        _parse_dates(frame["date"], "ingest.load_returns"),
        tuple(frame.columns[1:]),
        frame.iloc[:, 1:].to_numpy(dtype=float),
    )
