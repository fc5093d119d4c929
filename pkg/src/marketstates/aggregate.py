"""Global feature rankings per cluster and the relevant/irrelevant cutoff.

Per-instance relevances are reduced per cluster either by the feature-wise median
or by "mode-mode" counting (how often each feature is an instance's top feature).
Sorted ascending, the scores form an elbow curve; a two-segment Bayesian
change-point scan over that curve splits the few relevant features on the right
from the flat plateau on the left.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import PipelineError

METHODS = ("mode-mode", "median")
MIN_CURVE_LENGTH = 5
# residual sums below this fraction of the curve's total variation count as exact fits
_EXACT_FIT_RTOL = 1e-20


@dataclass(frozen=True)
class AggregatedRelevance:
    cluster_id: int
    method: str
    scores: np.ndarray
    instance_count: int | None


@dataclass(frozen=True)
class RelevanceCurve:
    cluster_id: int
    method: str
    sorted_scores: np.ndarray
    permutation: np.ndarray  # feature index at each sorted position


@dataclass(frozen=True)
class ChangePointResult:
    curve: RelevanceCurve
    posterior: np.ndarray  # indexed by candidate, see `candidates`
    candidates: np.ndarray  # split positions m = 2 .. N-2
    map_index: int
    relevant_mask: np.ndarray  # per feature (original order)


def _cluster_rows(rho, op: str) -> np.ndarray:
    rho = np.asarray([r.rho for r in rho] if not isinstance(rho, np.ndarray) else rho, dtype=float)
    if rho.ndim != 2 or len(rho) == 0:
        raise PipelineError(op, "empty cluster")
    return rho


def median_aggregate(relevances, cluster_id: int = 0) -> AggregatedRelevance:
    """Feature-wise median of the cluster's relevances (midpoint for even counts)."""
    rho = _cluster_rows(relevances, "aggregate.median_aggregate")
    return AggregatedRelevance(cluster_id, "median", np.median(rho, axis=0), len(rho))


def mode_mode(relevances, cluster_id: int = 0) -> AggregatedRelevance:
    """Count, per feature, the instances whose largest (signed) relevance it holds."""
    rho = _cluster_rows(relevances, "aggregate.mode_mode")
    winners = np.argmax(rho, axis=1)
    counts = np.bincount(winners, minlength=rho.shape[1])
    return AggregatedRelevance(cluster_id, "mode-mode", counts.astype(float), len(rho))


def aggregate_clusters(
    rho: np.ndarray, cluster_ids: np.ndarray, method: str, k: int | None = None
) -> list[AggregatedRelevance]:
    """One aggregate per non-empty cluster, ordered by cluster id."""
    if method not in METHODS:
        raise PipelineError("aggregate.aggregate_clusters", f"unknown method {method!r}")
    reducer = mode_mode if method == "mode-mode" else median_aggregate
    k = int(cluster_ids.max()) + 1 if k is None else k
    return [
        reducer(rho[cluster_ids == j], cluster_id=j)
        for j in range(k)
        if np.any(cluster_ids == j)
    ]


def sort_curve(agg: AggregatedRelevance) -> RelevanceCurve:
    perm = np.argsort(agg.scores, kind="stable")
    return RelevanceCurve(agg.cluster_id, agg.method, agg.scores[perm], perm)


def _segment_rss(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    slope = (xc @ yc) / (xc @ xc)
    resid = yc - slope * xc
    return float(resid @ resid)


def changepoint_posterior(values: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Posterior over a single split of ``values`` into two straight-line segments.

    Candidate split ``m`` fits independent least-squares lines to positions
    ``[0, m)`` and ``[m, N)``. Integrating out the four line parameters and the
    unknown noise scale (Jeffreys prior) leaves a marginal likelihood proportional
    to ``(RSS_left + RSS_right) ** (-(N - 4) / 2)``; the prior over ``m`` is flat.
    Splits with an exact fit share all the probability mass.

    Returns:
        ``(candidates, posterior)`` with ``candidates = 2 .. N-2``.
    """
    y = np.asarray(values, dtype=float)
    n = len(y)
    if n < MIN_CURVE_LENGTH:
        raise PipelineError(
            "aggregate.bayesian_changepoint",
            f"curve has {n} points; minimum length is {MIN_CURVE_LENGTH}",
        )
    x = np.arange(n, dtype=float)
    candidates = np.arange(2, n - 1)
    rss = np.array([_segment_rss(x[:m], y[:m]) + _segment_rss(x[m:], y[m:]) for m in candidates])
    total = float(((y - y.mean()) ** 2).sum())
    exact = rss <= _EXACT_FIT_RTOL * total
    if exact.any():
        posterior = exact / exact.sum()
    else:
        logp = -0.5 * (n - 4) * np.log(rss)
        logp -= logp.max()
        posterior = np.exp(logp)
        posterior /= posterior.sum()
    return candidates, posterior


def bayesian_changepoint(curve: RelevanceCurve) -> ChangePointResult:
    """MAP split of an ascending relevance curve.

    Ties in the posterior go to the larger split, keeping the relevant set small.
    Every feature at a sorted position ``>= map_index`` is marked relevant.
    """
    candidates, posterior = changepoint_posterior(curve.sorted_scores)
    best = np.flatnonzero(posterior == posterior.max())[-1]
    map_index = int(candidates[best])
    mask = np.zeros(len(curve.sorted_scores), dtype=bool)
    mask[curve.permutation[map_index:]] = True
    return ChangePointResult(curve, posterior, candidates, map_index, mask)


def select_relevant(result: ChangePointResult, feature_names: Sequence[str] | None = None) -> list:
    """Relevant features in original feature order (names if given, else indices)."""
    idx = np.flatnonzero(result.relevant_mask)
    if feature_names is None:
        return [int(i) for i in idx]
    return [feature_names[i] for i in idx]


def top_feature_per_cluster(aggregates: Sequence[AggregatedRelevance]) -> list[int]:
    """One distinct feature per cluster, visiting clusters in id order.

    Each cluster takes its highest-scoring feature not already claimed by an
    earlier cluster (score ties go to the lower feature index).
    """
    chosen: list[int] = []
    for agg in sorted(aggregates, key=lambda a: a.cluster_id):
        # descending score, ascending index on ties
        ranking = np.lexsort((np.arange(len(agg.scores)), -agg.scores))
        for feature in ranking:
            if int(feature) not in chosen:
                chosen.append(int(feature))
                break
    return chosen


def write_aggregates(aggregates: Sequence[AggregatedRelevance], names: Sequence[str], path) -> None:
    rows = [
        (a.cluster_id, a.method, names[i], float(s))
        for a in aggregates
        for i, s in enumerate(a.scores)
    ]
    pd.DataFrame(rows, columns=["cluster_id", "method", "feature", "score"]).to_csv(path, index=False)


def load_aggregates(path: str | Path) -> tuple[list[AggregatedRelevance], list[str]]:
    op = "aggregate.load_aggregates"
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise PipelineError(op, f"cannot read {path}: {exc}") from None
    if list(frame.columns) != ["cluster_id", "method", "feature", "score"]:
        raise PipelineError(op, f"malformed header in {path}")
    names: list[str] = list(dict.fromkeys(frame["feature"]))
    out = []
    for (cid, method), group in frame.groupby(["cluster_id", "method"], sort=False):
        scores = group.set_index("feature").loc[names, "score"].to_numpy(dtype=float)
        count = int(scores.sum()) if method == "mode-mode" else None
        out.append(AggregatedRelevance(int(cid), str(method), scores, count))
    return out, names


def write_elbow(result: ChangePointResult, names: Sequence[str], path) -> None:
    curve = result.curve
    pd.DataFrame(
        {
            "rank": np.arange(len(curve.sorted_scores)),
            "feature": [names[i] for i in curve.permutation],
            "score": curve.sorted_scores,
            "is_relevant": (np.arange(len(curve.sorted_scores)) >= result.map_index).astype(int),
        }
    ).to_csv(path, index=False)


def changepoint_document(results: Sequence[ChangePointResult], names: Sequence[str]) -> dict:
    """JSON-ready summary: per method, per cluster posterior, MAP split and features."""
    doc: dict = {}
    for r in results:
        doc.setdefault(r.curve.method, {})[str(r.curve.cluster_id)] = {
            "candidates": r.candidates.tolist(),
            "posterior": r.posterior.tolist(),
            "map_index": r.map_index,
            "relevant": select_relevant(r, names),
        }
    return doc


def write_changepoints(results: Sequence[ChangePointResult], names: Sequence[str], path) -> None:
    Path(path).write_text(json.dumps(changepoint_document(results, names), indent=2) + "\n")
