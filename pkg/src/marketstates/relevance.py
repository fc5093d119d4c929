"""Neuralised k-means and layer-wise relevance propagation onto input features.

For a target cluster ``j`` the k-means decision is rewritten as a small network:
a linear layer ``h_l = w_l . x + b_l`` for every competitor ``l != j``, followed by
``f_j = min_l h_l``; ``x`` belongs to ``j`` exactly when ``f_j > 0``. Relevance is
sent back from ``f_j`` to the ``h_l`` through a soft-min, then from each ``h_l``
onto the inputs in proportion to ``(x_i - m_{i,l}) w_{i,l}``, where ``m_l`` is the
midpoint between the two centroids.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .clustering import ClusterModel, _as_matrix, assign_all
from .errors import PipelineError
from .preprocess import _format_dates, _parse_dates

BETA_SCOPES = ("members", "all")
_DENOM_FLOOR = 1e-12


@dataclass(frozen=True)
class NeuralisedClassifier:
    target: int
    competitors: np.ndarray  # ids l != j, ascending
    weights: np.ndarray  # (k-1, d), w_l = 2 (c_j - c_l)
    biases: np.ndarray  # (k-1,), b_l = |c_l|^2 - |c_j|^2
    midpoints: np.ndarray  # (k-1, d), m_l = (c_j + c_l) / 2


@dataclass(frozen=True)
class ClassifierEvaluation:
    h: np.ndarray  # (..., k-1)
    f: np.ndarray | float  # min over the last axis of h


@dataclass(frozen=True)
class RelevanceVector:
    date: np.datetime64 | None
    cluster_id: int
    rho: np.ndarray
    f: float
    beta: float


def neuralise(model: ClusterModel, j: int) -> NeuralisedClassifier:
    if not 0 <= j < model.k:
        raise PipelineError("relevance.neuralise", f"cluster id {j} outside [0, {model.k})")
    c = model.centroids
    others = np.array([l for l in range(model.k) if l != j])
    sq = (c ** 2).sum(axis=1)
    return NeuralisedClassifier(
        target=j,
        competitors=others,
        weights=2.0 * (c[j] - c[others]),
        biases=sq[others] - sq[j],
        midpoints=0.5 * (c[j] + c[others]),
    )


def evaluate(classifier: NeuralisedClassifier, vector) -> ClassifierEvaluation:
    """Hidden scores ``h`` and evidence ``f``; accepts one vector or a batch."""
    x = np.asarray(vector, dtype=float)
    if x.shape[-1] != classifier.weights.shape[1]:
        raise PipelineError(
            "relevance.evaluate",
            f"dimension mismatch: vector {x.shape[-1]}, classifier {classifier.weights.shape[1]}",
        )
    h = x @ classifier.weights.T + classifier.biases
    return ClassifierEvaluation(h, h.min(axis=-1))


def estimate_beta(classifier: NeuralisedClassifier, members) -> float:
    """Soft-min stiffness: the inverse mean evidence over ``members``."""
    X = _as_matrix(members)
    if X.size == 0:
        raise PipelineError("relevance.estimate_beta", f"no instances for cluster {classifier.target}")
    mean_f = float(np.mean(evaluate(classifier, X).f))
    if not mean_f > 0:
        raise PipelineError(
            "relevance.estimate_beta",
            f"mean evidence {mean_f:.6g} for cluster {classifier.target} is not positive",
        )
    return 1.0 / mean_f


def softmin_weights(h: np.ndarray, beta: float) -> np.ndarray:
    """``exp(-beta h_l) / sum exp(-beta h_l)`` along the last axis, shifted for stability."""
    z = -beta * np.asarray(h, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def lrp_cluster_layer(evaluation: ClassifierEvaluation, beta: float) -> np.ndarray:
    """Split the evidence ``f`` over the competitor scores by soft-min weights."""
    if not (np.isfinite(beta) and beta > 0):
        raise PipelineError("relevance.lrp_cluster_layer", f"beta must be finite and > 0, got {beta}")
    return softmin_weights(evaluation.h, beta) * np.asarray(evaluation.f)[..., None]


def lrp_input_layer(
    rho_l: np.ndarray, vector, classifier: NeuralisedClassifier, date=None
) -> np.ndarray:
    """Redistribute each competitor's relevance onto the input features.

    Feature ``i`` receives ``sum_l (x_i - m_{i,l}) w_{i,l} / sum_i (x_i - m_{i,l}) w_{i,l} * rho_l``.
    The inner sum equals ``h_l``; a competitor with non-zero relevance whose
    denominator vanishes (the instance sits on that decision hyperplane) is an
    error.
    """
    x = np.asarray(vector, dtype=float)
    rho_l = np.asarray(rho_l, dtype=float)
    contrib = (x[..., None, :] - classifier.midpoints) * classifier.weights  # (..., k-1, d)
    denom = contrib.sum(axis=-1)
    bad = (np.abs(denom) <= _DENOM_FLOOR) & (rho_l != 0)
    if bad.any():
        where = np.argwhere(bad)[0]
        l = int(classifier.competitors[where[-1]])
        at = f" on {date}" if date is not None else ""
        raise PipelineError(
            "relevance.lrp_input_layer",
            f"instance{at} lies on the decision hyperplane between clusters "
            f"{classifier.target} and {l}",
        )
    safe = np.where(bad | (np.abs(denom) <= _DENOM_FLOOR), 1.0, denom)
    share = np.where((rho_l == 0)[..., None], 0.0, contrib / safe[..., None])
    return np.einsum("...ld,...l->...d", share, rho_l)


@dataclass(frozen=True)
class RelevanceTable:
    """Relevance scores of a whole dataset, one row per instance."""

    dates: np.ndarray
    cluster_ids: np.ndarray
    f: np.ndarray
    beta: np.ndarray
    rho: np.ndarray  # (n, d)
    feature_names: tuple[str, ...]

    def __len__(self):
        return len(self.cluster_ids)

    def vectors(self) -> list[RelevanceVector]:
        return [
            RelevanceVector(d, int(c), r, float(f), float(b))
            for d, c, r, f, b in zip(self.dates, self.cluster_ids, self.rho, self.f, self.beta)
        ]

    def for_cluster(self, j: int) -> np.ndarray:
        return self.rho[self.cluster_ids == j]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rho, columns=list(self.feature_names))
        frame.insert(0, "beta", self.beta)
        frame.insert(0, "f", self.f)
        frame.insert(0, "cluster_id", self.cluster_ids)
        frame.insert(0, "date", _format_dates(self.dates))
        return frame


def relevance_table(
    model: ClusterModel,
    dataset,
    dates: np.ndarray | None = None,
    beta_scope: str = "members",
    feature_names: Sequence[str] | None = None,
) -> RelevanceTable:
    """Relevance of every instance with respect to the cluster it is assigned to.

    ``beta`` is estimated once per cluster, from the evidence of that cluster's
    members (``beta_scope="members"``) or of every instance in ``dataset``
    (``"all"``), and shared by all instances of the cluster.
    """
    op = "relevance.relevance"
    if beta_scope not in BETA_SCOPES:
        raise PipelineError(op, f"unknown beta scope {beta_scope!r}")
    X = _as_matrix(dataset)
    if X.size == 0:
        raise PipelineError(op, "empty dataset")
    if dates is None:
        dates = np.array([np.datetime64("NaT")] * len(X))
    ids, _ = assign_all(model, X)
    rho = np.zeros_like(X)
    f = np.zeros(len(X))
    beta = np.zeros(len(X))
    for j in range(model.k):
        rows = np.flatnonzero(ids == j)
        if len(rows) == 0:
            continue
        clf = neuralise(model, j)
        b = estimate_beta(clf, X[rows] if beta_scope == "members" else X)
        ev = evaluate(clf, X[rows])
        rho_l = lrp_cluster_layer(ev, b)
        try:
            rho[rows] = lrp_input_layer(rho_l, X[rows], clf)
        except PipelineError:
            # rerun row by row to name the offending date
            for r, row in enumerate(rows):
                lrp_input_layer(rho_l[r], X[row], clf, date=dates[row])
            raise
        f[rows] = ev.f
        beta[rows] = b
    if feature_names is None:
        feature_names = model.feature_names or tuple(f"x{i}" for i in range(X.shape[1]))
    return RelevanceTable(np.asarray(dates), ids, f, beta, rho, tuple(feature_names))


def relevance(model: ClusterModel, dataset, **kwargs) -> list[RelevanceVector]:
    """Per-instance :class:`RelevanceVector` list; see :func:`relevance_table`."""
    dates = None
    if not isinstance(dataset, np.ndarray):
        dataset = list(dataset)
        if dataset and hasattr(dataset[0], "date"):
            dates = np.array([v.date for v in dataset])
    return relevance_table(model, dataset, dates=dates, **kwargs).vectors()


def write_relevance(table: RelevanceTable, path: str | Path) -> None:
    table.to_frame().to_csv(path, index=False)


def load_relevance(path: str | Path) -> RelevanceTable:
    op = "relevance.load_relevance"
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise PipelineError(op, f"cannot read {path}: {exc}") from None
    if list(frame.columns[:4]) != ["date", "cluster_id", "f", "beta"]:
        raise PipelineError(op, f"malformed header in {path}")
    return RelevanceTable(
        _parse_dates(frame["date"], op),
        frame["cluster_id"].to_numpy(dtype=int),
        frame["f"].to_numpy(dtype=float),
        frame["beta"].to_numpy(dtype=float),
        frame.iloc[:, 4:].to_numpy(dtype=float),
        tuple(frame.columns[4:]),
    )
