"""Lloyd's k-means on correlation feature vectors, with seeded initialisation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import PipelineError
from .preprocess import FeatureVector, _format_dates

logger = logging.getLogger(__name__)

INIT_METHODS = ("spread", "uniform")


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray  # (k, d)
    seed: int
    tol: float = 1e-6
    inertia: float = float("nan")
    iterations_run: int = 0
    init: str = "spread"
    labels: np.ndarray | None = None  # training labels of the final assignment
    inertia_history: tuple[float, ...] = field(default=(), repr=False)
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        c = self.centroids
        if c.ndim != 2 or c.shape[0] < 2:
            raise PipelineError("clustering.ClusterModel", "need a (k, d) centroid array with k >= 2")
        if not np.all(np.isfinite(c)):
            raise PipelineError("clustering.ClusterModel", "centroid entries must be finite")
        if len(np.unique(c, axis=0)) != len(c):
            raise PipelineError("clustering.ClusterModel", "two centroids are identical")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class Assignment:
    date: np.datetime64 | None
    cluster_id: int
    distance: float


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        return np.atleast_2d(np.asarray(vectors, dtype=float))
    vectors = list(vectors)
    if vectors and isinstance(vectors[0], FeatureVector):
        return np.array([v.values for v in vectors], dtype=float)
    return np.atleast_2d(np.asarray(vectors, dtype=float))


def squared_distances(X: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact ``||x - c||^2`` table of shape ``(n, k)`` (no expansion trick)."""
    out = np.empty((len(X), len(centroids)))
    for start in range(0, len(X), chunk):
        diff = X[start:start + chunk, None, :] - centroids[None, :, :]
        out[start:start + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _init_spread(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # Greedy D^2 seeding: draw a few candidates with probability proportional to
    # their squared distance from the nearest centre so far, keep the candidate
    # that lowers the total squared distance the most.
    n = len(X)
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(n))]
    d2 = squared_distances(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            candidates = rng.choice(n, size=trials, p=d2 / total)
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            candidates = rng.choice(remaining, size=1)
        cand_d2 = np.minimum(d2[:, None], squared_distances(X, X[candidates]))
        best = int(np.argmin(cand_d2.sum(axis=0)))
        chosen.append(int(candidates[best]))
        d2 = cand_d2[:, best]
    return X[chosen].copy()


def _init_uniform(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    return X[rng.choice(len(X), size=k, replace=False)].copy()


def repair_empty_clusters(
    X: np.ndarray, centroids: np.ndarray, labels: np.ndarray, d2: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reseed every centroid that has no members.

    Each orphaned centroid moves onto the point farthest from its currently
    assigned centroid; that point joins it at distance 0, so inertia cannot grow.
    Returns updated ``(centroids, labels, d2)`` where ``d2`` holds each point's
    squared distance to its own centroid. Inputs without empty clusters come back
    unchanged.
    """
    counts = np.bincount(labels, minlength=len(centroids))
    empty = np.flatnonzero(counts == 0)
    if len(empty) == 0:
        return centroids, labels, d2
    centroids, labels, d2 = centroids.copy(), labels.copy(), d2.copy()
    for j in empty:
        donors = np.bincount(labels, minlength=len(centroids))
        # never strip the last member of another cluster
        candidates = np.flatnonzero(donors[labels] > 1)
        far = candidates[np.argmax(d2[candidates])]
        centroids[j] = X[far]
        labels[far] = j
        d2[far] = 0.0
        logger.debug("reseeded empty cluster %d at point %d", j, far)
    return centroids, labels, d2


def fit_kmeans(
    vectors,
    k: int = 8,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    init: str = "spread",
    feature_names: Sequence[str] | None = None,
) -> ClusterModel:
    """Fit k-means with Lloyd iterations.

    Args:
        vectors: ``(n, d)`` array or sequence of :class:`FeatureVector`.
        k: number of clusters.
        seed: seed for the initialisation RNG.
        max_iter: upper bound on Lloyd iterations.
        tol: stop once no centroid moves farther than this (Euclidean).
        init: ``"spread"`` for D^2-weighted seeding, ``"uniform"`` for k distinct
            random points.
        feature_names: optional column names stored in the model file.

    Returns:
        A :class:`ClusterModel` whose ``labels`` are the argmin assignment of every
        training vector to the final centroids.
    """
    op = "clustering.fit_kmeans"
    X = _as_matrix(vectors)
    if X.size == 0:
        raise PipelineError(op, "empty input")
    if len(X) < k:
        raise PipelineError(op, f"fewer vectors ({len(X)}) than clusters ({k})")
    if k < 2:
        raise PipelineError(op, f"k must be >= 2, got {k}")
    if max_iter < 1 or tol < 0:
        raise PipelineError(op, "max_iter must be >= 1 and tol >= 0")
    if init not in INIT_METHODS:
        raise PipelineError(op, f"unknown init {init!r}; choose from {INIT_METHODS}")

    rng = np.random.default_rng(seed)
    centroids = _init_spread(X, k, rng) if init == "spread" else _init_uniform(X, k, rng)
    history = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2_all = squared_distances(X, centroids)
        labels = np.argmin(d2_all, axis=1)
        d2 = d2_all[np.arange(len(X)), labels]
        centroids, labels, d2 = repair_empty_clusters(X, centroids, labels, d2)
        history.append(float(d2.sum()))
        updated = np.array([X[labels == j].mean(axis=0) for j in range(k)])
        shift = np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max()
        centroids = updated
        if shift <= tol:
            break
    d2_all = squared_distances(X, centroids)
    labels = np.argmin(d2_all, axis=1)
    inertia = float(d2_all[np.arange(len(X)), labels].sum())
    history.append(inertia)
    logger.info("k-means: k=%d, %d iterations, inertia %.6g", k, iterations, inertia)
    return ClusterModel(
        centroids=centroids,
        seed=seed,
        tol=tol,
        inertia=inertia,
        iterations_run=iterations,
        init=init,
        labels=labels,
        inertia_history=tuple(history),
        feature_names=tuple(feature_names) if feature_names is not None else None,
    )


def assign(model: ClusterModel, vector) -> Assignment:
    """Nearest centroid by Euclidean distance; ties go to the lowest cluster id."""
    date = vector.date if isinstance(vector, FeatureVector) else None
    x = np.asarray(vector.values if isinstance(vector, FeatureVector) else vector, dtype=float)
    if x.shape != (model.dim,):
        raise PipelineError(
            "clustering.assign", f"dimension mismatch: vector {x.shape}, centroids {model.dim}"
        )
    d2 = squared_distances(x[None, :], model.centroids)[0]
    j = int(np.argmin(d2))
    return Assignment(date, j, float(np.sqrt(d2[j])))


def assign_all(model: ClusterModel, vectors) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`assign`: ``(cluster_ids, distances)``."""
    X = _as_matrix(vectors)
    if X.shape[1] != model.dim:
        raise PipelineError(
            "clustering.assign", f"dimension mismatch: vectors {X.shape[1]}, centroids {model.dim}"
        )
    d2 = squared_distances(X, model.centroids)
    ids = np.argmin(d2, axis=1)
    return ids, np.sqrt(d2[np.arange(len(X)), ids])


def save_model(model: ClusterModel, path: str | Path) -> None:
    doc = {
        "k": model.k,
        "seed": model.seed,
        "tol": model.tol,
        "init": model.init,
        "inertia": model.inertia,
        "iterations_run": model.iterations_run,
        "index_map": list(model.feature_names) if model.feature_names else None,
        "centroids": model.centroids.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_model(path: str | Path) -> ClusterModel:
    op = "clustering.load_model"
    try:
        doc = json.loads(Path(path).read_text())
        centroids = np.asarray(doc["centroids"], dtype=float)
        if centroids.shape[0] != doc["k"]:
            raise PipelineError(op, f"k={doc['k']} but {centroids.shape[0]} centroids stored")
        return ClusterModel(
            centroids=centroids,
            seed=int(doc["seed"]),
            tol=float(doc["tol"]),
            inertia=float(doc.get("inertia", "nan")),
            iterations_run=int(doc.get("iterations_run", 0)),
            init=doc.get("init", "spread"),
            feature_names=tuple(doc["index_map"]) if doc.get("index_map") else None,
        )
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise PipelineError(op, f"cannot read model {path}: {exc}") from None


def write_assignments(dates, cluster_ids, distances, path: str | Path) -> None:
    pd.DataFrame(
        {"date": _format_dates(dates), "cluster_id": cluster_ids, "distance": distances}
    ).to_csv(path, index=False)


def load_assignments(path: str | Path) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != ["date", "cluster_id", "distance"]:
        raise PipelineError("clustering.load_assignments", f"malformed header in {path}")
    return frame
