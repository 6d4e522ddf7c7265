"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's incremental code paths:
posteriors are recomputed by enumerating each copy's neighbor set from the
forward adjacency definition, so they can catch bookkeeping bugs in the
reverse-adjacency update path.
"""

import numpy as np
import pytest

from mfsearch.model import HIGH, LOW, ModelState, Observation, other, update
from mfsearch.pool import PointPool


def make_pool(n, knn=None, weights=None, features=None):
    """Hand-built pool; knn=None gives isolated points (pair edges only)."""
    if features is None:
        features = np.arange(n, dtype=float)[:, None]
    if knn is None:
        ids = np.zeros((n, 0), dtype=np.int64)
        w = np.zeros((n, 0))
    else:
        ids = np.asarray(knn, dtype=np.int64)
        w = np.ones_like(ids, dtype=float) if weights is None else np.asarray(
            weights, dtype=float)
    return PointPool(features, ids, w)


def random_pool(rng, n, k):
    """Random geometric pool with an exact euclidean graph."""
    feats = rng.normal(size=(n, 2))
    return PointPool.build(feats, neighbors=k)


def random_observations(rng, pool, count, exclude=()):
    """Distinct (point, fidelity) observations with random labels."""
    slots = [(p, f) for p in range(pool.n) for f in (HIGH, LOW)
             if (p, f) not in exclude]
    picks = rng.choice(len(slots), size=min(count, len(slots)), replace=False)
    return [Observation(slots[i][0], slots[i][1], int(rng.integers(2)))
            for i in picks]


def neighbor_set(pool, point, fidelity, damping):
    """The copy's neighbor set per the model definition: (point, fid, weight)
    triples built from the forward adjacency only."""
    out = [(point, other(fidelity), damping * 1.0)]
    for nb, w in zip(pool.knn_ids[point], pool.knn_weights[point]):
        out.append((int(nb), fidelity, float(w)))
        out.append((int(nb), other(fidelity), damping * float(w)))
    return out


def posterior_oracle(pool, observations, point, fidelity, pos_prior, damping):
    """From-scratch posterior via direct evaluation of the closed form."""
    labels = {(o.point, o.fidelity): o.label for o in observations}
    num = den = 0.0
    for nb, fid, w in neighbor_set(pool, point, fidelity, damping):
        if (nb, fid) in labels:
            num += w * labels[(nb, fid)]
            den += w
    return (pos_prior + num) / (1.0 + den)


def affected_oracle(pool, point, fidelity):
    """Copies whose neighbor sets contain (point, fidelity), by forward scan."""
    out = {(point, other(fidelity))}
    for x in range(pool.n):
        if point in pool.knn_ids[x]:
            out.add((x, HIGH))
            out.add((x, LOW))
    return out


def build_state(pool, observations, pos_prior=0.05, damping=0.5):
    state = ModelState(pool.n, pos_prior=pos_prior, damping=damping)
    for obs in observations:
        update(state, pool, obs)
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
