"""Point pools: dataset ingestion, exact nearest-neighbor graphs, synthetic
benchmark pools, and graph caching.

A :class:`PointPool` is the immutable substrate every other module works on.
It holds the feature matrix, the forward K-nearest-neighbor adjacency with
base edge weights, and the reverse adjacency (who lists me as a neighbor),
which is what makes incremental classifier updates cheap.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

METRICS = ("euclidean", "jaccard")
WEIGHTINGS = ("uniform", "similarity")

CACHE_MAGIC = "mfsearch-knn-cache"
CACHE_VERSION = 1


class CacheError(Exception):
    """Raised when a cached neighbor graph is corrupt or mismatched."""


@dataclass(frozen=True)
class SyntheticParams:
    """Parameters for a clustered Gaussian benchmark pool.

    Positives live in a designated leading subset of clusters, so the
    neighbor structure carries real signal about the rare class.
    """

    n: int
    dims: int = 10
    clusters: int = 8
    prevalence: float = 0.05
    tightness: float = 0.35
    seed: int = 0
    positive_clusters: int = 1

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError(f"prevalence must be in (0,1), got {self.prevalence}")
        if self.n < 2 or self.dims < 1 or self.clusters < 1:
            raise ValueError("n >= 2, dims >= 1, clusters >= 1 required")
        if not 1 <= self.positive_clusters <= self.clusters:
            raise ValueError("positive_clusters out of range")


@dataclass(frozen=True)
class DatasetSpec:
    """Where a pool comes from and how its neighbor graph is built."""

    source: str | SyntheticParams
    neighbors: int = 50
    metric: str = "euclidean"
    label_column: str = "label"
    weighting: str = "uniform"

    def __post_init__(self):
        if self.neighbors < 1:
            raise ValueError("neighbor count must be >= 1")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")


class PointPool:
    """Immutable point set with a precomputed exact K-NN graph.

    Attributes
    ----------
    n : number of points.
    features : (n, d) float array.
    knn_ids : (n, K) neighbor ids, nearest first, ties broken by lower id.
    knn_weights : (n, K) strictly positive base edge weights.
    rknn_indptr / rknn_src / rknn_weights : CSR-style reverse adjacency;
        for point p, rows rknn_indptr[p]:rknn_indptr[p+1] list the points
        that include p in their neighbor list, with the weight they assign.
    """

    def __init__(self, features, knn_ids, knn_weights, metric="euclidean"):
        features = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
        knn_ids = np.asarray(knn_ids, dtype=np.int64)
        knn_weights = np.asarray(knn_weights, dtype=np.float64)
        n = features.shape[0]
        if knn_ids.shape != knn_weights.shape or knn_ids.shape[0] != n:
            raise ValueError("knn arrays must be (n, K) and aligned")
        if knn_ids.size:
            if knn_ids.min() < 0 or knn_ids.max() >= n:
                raise ValueError("neighbor id out of range")
            if (knn_ids == np.arange(n)[:, None]).any():
                raise ValueError("self-loop in neighbor list")
            if not np.all(np.isfinite(knn_weights)) or (knn_weights <= 0).any():
                raise ValueError("base weights must be strictly positive and finite")
        self.n = n
        self.features = features
        self.metric = metric
        self.knn_ids = knn_ids
        self.knn_weights = knn_weights
        self.rknn_indptr, self.rknn_src, self.rknn_weights = _transpose_graph(
            knn_ids, knn_weights, n
        )
        self.max_weight = float(knn_weights.max()) if knn_weights.size else 1.0
        self.feature_hash = feature_digest(features)

    @property
    def k(self) -> int:
        return self.knn_ids.shape[1] if self.knn_ids.ndim == 2 else 0

    def reverse_neighbors(self, point: int):
        """(source ids, their weights for `point`) from the reverse adjacency."""
        lo, hi = self.rknn_indptr[point], self.rknn_indptr[point + 1]
        return self.rknn_src[lo:hi], self.rknn_weights[lo:hi]

    def digest(self) -> str:
        """Content hash covering features, graph, and metric."""
        h = hashlib.sha256()
        h.update(self.feature_hash.encode())
        h.update(self.knn_ids.tobytes())
        h.update(self.knn_weights.tobytes())
        h.update(self.metric.encode())
        return h.hexdigest()

    @classmethod
    def build(cls, features, neighbors=50, metric="euclidean", weighting="uniform"):
        features = np.asarray(features, dtype=np.float64)
        ids, weights = build_neighbor_graph(
            features, neighbors, metric, weighting=weighting
        )
        return cls(features, ids, weights, metric=metric)


def feature_digest(features) -> str:
    arr = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def _transpose_graph(knn_ids, knn_weights, n):
    """Exact transpose of the forward adjacency, sources in ascending order."""
    flat_dst = knn_ids.ravel()
    flat_src = np.repeat(np.arange(n, dtype=np.int64), knn_ids.shape[1] if knn_ids.ndim == 2 else 0)
    flat_w = knn_weights.ravel()
    order = np.lexsort((flat_src, flat_dst))
    dst_sorted = flat_dst[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    counts = np.bincount(dst_sorted, minlength=n)
    np.cumsum(counts, out=indptr[1:])
    return indptr, flat_src[order], flat_w[order]


def _pairwise_distance(block, features, metric):
    if metric == "euclidean":
        # ||a-b||^2 expanded; clip tiny negatives from cancellation
        sq = (
            (block * block).sum(axis=1)[:, None]
            + (features * features).sum(axis=1)[None, :]
            - 2.0 * block @ features.T
        )
        return np.sqrt(np.clip(sq, 0.0, None))
    if metric == "jaccard":
        inter = block @ features.T
        union = block.sum(axis=1)[:, None] + features.sum(axis=1)[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(union > 0, inter / np.maximum(union, 1e-300), 1.0)
        return 1.0 - sim
    raise ValueError(f"unknown metric {metric!r}")


def build_neighbor_graph(features, neighbors, metric="euclidean", weighting="uniform",
                         block_size=512):
    """Exact K nearest neighbors for every point.

    Distance ties are broken by lower point id. The neighbor count is
    truncated to n-1 for degenerate small pools. Returns (ids, weights)
    arrays of shape (n, K).
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise ValueError("need at least two points to build a neighbor graph")
    if metric == "jaccard" and not np.isin(features, (0.0, 1.0)).all():
        raise ValueError("jaccard metric requires binary features")
    k = min(int(neighbors), n - 1)
    ids = np.empty((n, k), dtype=np.int64)
    dists = np.empty((n, k), dtype=np.float64)
    point_ids = np.arange(n)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        d = _pairwise_distance(features[start:stop], features, metric)
        rows = np.arange(start, stop)
        d[np.arange(stop - start), rows] = np.inf  # exclude self
        for r in range(stop - start):
            order = np.lexsort((point_ids, d[r]))[:k]
            ids[start + r] = order
            dists[start + r] = d[r][order]
    if weighting == "uniform":
        weights = np.ones_like(dists)
    elif weighting == "similarity":
        if metric == "jaccard":
            weights = np.clip(1.0 - dists, 1e-6, None)
        else:
            weights = 1.0 / (1.0 + dists)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return ids, weights


def load_pool(spec: DatasetSpec):
    """Materialize (PointPool, true exact-oracle labels) from a dataset spec."""
    if isinstance(spec.source, SyntheticParams):
        return synth_pool(spec.source, neighbors=spec.neighbors,
                          metric=spec.metric, weighting=spec.weighting)
    features, labels = _read_csv(spec.source, spec.label_column)
    pool = PointPool.build(features, neighbors=spec.neighbors,
                           metric=spec.metric, weighting=spec.weighting)
    return pool, labels


def _read_csv(path, label_column):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValueError(f"{path}: missing label column {label_column!r}")
        label_idx = header.index(label_column)
        feat_idx = [i for i in range(len(header)) if i != label_idx]
        feats, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {row_no} has {len(row)} fields, "
                                 f"expected {len(header)}")
            try:
                feats.append([float(row[i]) for i in feat_idx])
            except ValueError as exc:
                raise ValueError(f"{path}: row {row_no}: {exc}") from None
            lab = row[label_idx].strip()
            if lab not in ("0", "1"):
                raise ValueError(f"{path}: row {row_no}: label must be 0 or 1, "
                                 f"got {lab!r}")
            labels.append(int(lab))
    if len(feats) < 2:
        raise ValueError(f"{path}: need at least two rows")
    return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int8)


def synth_pool(params: SyntheticParams, neighbors=50, metric="euclidean",
               weighting="uniform"):
    """Seeded clustered Gaussian pool with positives in designated clusters.

    The realized positive count is drawn binomially around prevalence * n and
    clamped to a +-20% band so downstream experiments stay comparable.
    """
    rng = np.random.default_rng(params.seed)
    centers = rng.normal(0.0, 1.0, size=(params.clusters, params.dims)) * 4.0
    assignment = rng.integers(0, params.clusters, size=params.n)
    features = centers[assignment] + rng.normal(
        0.0, params.tightness, size=(params.n, params.dims)
    )

    target = params.prevalence * params.n
    lo = max(1, int(np.ceil(0.8 * target)))
    hi = max(lo, int(np.floor(1.2 * target)))
    count = int(np.clip(rng.binomial(params.n, params.prevalence), lo, hi))

    eligible = np.flatnonzero(assignment < params.positive_clusters)
    if eligible.size < count:
        # widen the designated subset until the prevalence is feasible
        extra = params.positive_clusters
        while eligible.size < count and extra < params.clusters:
            extra += 1
            eligible = np.flatnonzero(assignment < extra)
        if eligible.size < count:
            raise ValueError(
                f"infeasible prevalence: need {count} positives, "
                f"only {eligible.size} candidate points"
            )
    chosen = rng.choice(eligible, size=count, replace=False)
    labels = np.zeros(params.n, dtype=np.int8)
    labels[chosen] = 1

    pool = PointPool.build(features, neighbors=neighbors, metric=metric,
                           weighting=weighting)
    return pool, labels


def cache_graph(pool: PointPool, path) -> None:
    """Persist a pool (features + graph) as a versioned binary container."""
    np.savez_compressed(
        path,
        magic=np.array(CACHE_MAGIC),
        version=np.array(CACHE_VERSION),
        metric=np.array(pool.metric),
        feature_hash=np.array(pool.feature_hash),
        features=pool.features,
        knn_ids=pool.knn_ids,
        knn_weights=pool.knn_weights,
    )


def load_cached(path, features=None) -> PointPool:
    """Load a cached pool, verifying integrity and (optionally) feature identity.

    Pass `features` to reject a cache built for a different feature matrix.
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            if str(data["magic"]) != CACHE_MAGIC:
                raise CacheError(f"{path}: not a neighbor-graph cache")
            if int(data["version"]) != CACHE_VERSION:
                raise CacheError(f"{path}: unsupported cache version")
            stored_hash = str(data["feature_hash"])
            feats = data["features"]
            ids = data["knn_ids"]
            weights = data["knn_weights"]
            metric = str(data["metric"])
    except CacheError:
        raise
    except Exception as exc:
        raise CacheError(f"{path}: unreadable cache ({exc})") from exc
    if feature_digest(feats) != stored_hash:
        raise CacheError(f"{path}: stored features do not match stored hash")
    if features is not None and feature_digest(features) != stored_hash:
        raise CacheError(f"{path}: cache was built for different features")
    return PointPool(feats, ids, weights, metric=metric)
