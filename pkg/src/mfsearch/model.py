"""Multifidelity k-NN probabilistic classifier with incremental updates.

Every point has two copies, one per oracle: the exact copy (``HIGH``) and the
surrogate copy (``LOW``). The neighbor set of a copy consists of both copies
of its graph neighbors plus the point's own opposite-fidelity copy.
Cross-fidelity edges are discounted by a damping factor in (0, 1) that is
re-estimated by maximum likelihood as labels accumulate.

The state keeps same-fidelity and cross-fidelity weight sums separately, so
the damping factor multiplies in at prediction time: changing it never
requires a rebuild, and incremental updates commute with batch construction.
Snapshots are journal frames; lookahead code conditions the real model on
putative labels and rolls back in LIFO order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HIGH = 0
LOW = 1
FIDELITY_NAMES = {HIGH: "H", LOW: "L"}

DEFAULT_DAMPING_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))


def other(fidelity: int) -> int:
    return 1 - fidelity


def _check_fidelity(fidelity):
    if fidelity not in (HIGH, LOW):
        raise ValueError(f"fidelity must be HIGH (0) or LOW (1), got {fidelity!r}")


@dataclass(frozen=True)
class Observation:
    """One revealed binary label for (point, fidelity)."""

    point: int
    fidelity: int
    label: int

    def __post_init__(self):
        _check_fidelity(self.fidelity)
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class Posterior:
    """Positive-class probability for one copy, strictly inside (0, 1)."""

    value: float
    point: int
    fidelity: int


class ModelState:
    """Mutable classifier state over a fixed pool size.

    Weight accumulators have shape (n, 2), indexed by [point, fidelity]:

    - ``pos_same`` / ``tot_same``: labeled same-fidelity neighbor weight.
    - ``pos_cross`` / ``tot_cross``: labeled cross-fidelity neighbor weight,
      stored undamped; the damping factor applies at prediction time.
    """

    def __init__(self, n: int, pos_prior: float = 0.05, damping: float = 0.5):
        if not 0.0 < pos_prior < 1.0:
            raise ValueError("positive-class prior must be in (0, 1)")
        if not 0.0 < damping < 1.0:
            raise ValueError("damping factor must be in (0, 1)")
        self.n = n
        self.pos_prior = float(pos_prior)
        self.damping = float(damping)
        self.pos_same = np.zeros((n, 2))
        self.tot_same = np.zeros((n, 2))
        self.pos_cross = np.zeros((n, 2))
        self.tot_cross = np.zeros((n, 2))
        self.labeled = np.zeros((n, 2), dtype=bool)
        self.labels = np.full((n, 2), -1, dtype=np.int8)
        self.observations: list[Observation] = []
        self._frames: list[dict] = []

    # -- construction ------------------------------------------------------

    @classmethod
    def from_observations(cls, pool, observations, pos_prior=0.05, damping=0.5):
        state = cls(pool.n, pos_prior=pos_prior, damping=damping)
        for obs in observations:
            update(state, pool, obs)
        return state

    def clone(self) -> "ModelState":
        """Independent deep copy (journal not carried over)."""
        dup = ModelState(self.n, pos_prior=self.pos_prior, damping=self.damping)
        dup.pos_same = self.pos_same.copy()
        dup.tot_same = self.tot_same.copy()
        dup.pos_cross = self.pos_cross.copy()
        dup.tot_cross = self.tot_cross.copy()
        dup.labeled = self.labeled.copy()
        dup.labels = self.labels.copy()
        dup.observations = list(self.observations)
        return dup

    # -- posteriors --------------------------------------------------------

    def posterior(self, point: int, fidelity: int, damping=None) -> float:
        q = self.damping if damping is None else damping
        num = (self.pos_prior + self.pos_same[point, fidelity]
               + q * self.pos_cross[point, fidelity])
        den = 1.0 + self.tot_same[point, fidelity] + q * self.tot_cross[point, fidelity]
        return num / den

    def posteriors(self, fidelity: int, damping=None) -> np.ndarray:
        """Vector of posteriors for all points on one fidelity."""
        q = self.damping if damping is None else damping
        num = (self.pos_prior + self.pos_same[:, fidelity]
               + q * self.pos_cross[:, fidelity])
        den = 1.0 + self.tot_same[:, fidelity] + q * self.tot_cross[:, fidelity]
        return num / den

    def pair_conditionals(self) -> tuple[np.ndarray, np.ndarray]:
        """Exact-copy posteriors conditioned on each hypothetical surrogate label.

        Returns (given negative, given positive) vectors. For points whose
        surrogate label is already observed the conditioning adds nothing and
        both vectors equal the plain posterior.
        """
        _, h0, h1, _ = self.scoring_vectors()
        return h0, h1

    def scoring_vectors(self):
        """(exact posterior, conditional given negative / positive surrogate
        label, surrogate posterior) for all points, sharing intermediates.
        One pass feeds every lookahead quantity the policies need."""
        q = self.damping
        num = self.pos_prior + self.pos_same[:, HIGH] + q * self.pos_cross[:, HIGH]
        den = 1.0 + self.tot_same[:, HIGH] + q * self.tot_cross[:, HIGH]
        pi_h = num / den
        den_c = den + q
        h0 = num / den_c
        h1 = (num + q) / den_c
        known = self.labeled[:, LOW]
        if known.any():
            h0 = np.where(known, pi_h, h0)
            h1 = np.where(known, pi_h, h1)
        num_l = self.pos_prior + self.pos_same[:, LOW] + q * self.pos_cross[:, LOW]
        den_l = 1.0 + self.tot_same[:, LOW] + q * self.tot_cross[:, LOW]
        return pi_h, h0, h1, num_l / den_l


# -- operations -------------------------------------------------------------


def predict(state: ModelState, pool, point: int, fidelity: int) -> Posterior:
    """Posterior that `point` is positive on `fidelity`.

    A copy is never its own neighbor, so this is also the leave-one-out
    predictive probability when the copy happens to be labeled.
    """
    _check_fidelity(fidelity)
    if not 0 <= point < pool.n:
        raise ValueError(f"unknown point id {point}")
    return Posterior(state.posterior(point, fidelity), point, fidelity)


def update(state: ModelState, pool, obs: Observation, collect_affected=True):
    """Fold one observation into the state.

    Returns the set of (point, fidelity) copies whose posterior can change:
    the paired copy of the observed point plus both copies of every point
    listing it as a neighbor. Duplicate observations are rejected. Lookahead
    code that discards the affected set passes collect_affected=False.
    """
    p, f, y = obs.point, obs.fidelity, obs.label
    if not 0 <= p < pool.n:
        raise ValueError(f"unknown point id {p}")
    if state.labeled[p, f]:
        raise ValueError(f"duplicate observation for point {p} on "
                         f"{FIDELITY_NAMES[f]}")
    src, w = pool.reverse_neighbors(p)
    _journal_touch(state, p, f, src)
    g = other(f)
    # own opposite copy, self edge weight 1 (cross-fidelity)
    state.pos_cross[p, g] += float(y)
    state.tot_cross[p, g] += 1.0
    if src.size:
        state.pos_same[src, f] += w * y
        state.tot_same[src, f] += w
        state.pos_cross[src, g] += w * y
        state.tot_cross[src, g] += w
    state.labeled[p, f] = True
    state.labels[p, f] = y
    state.observations.append(obs)
    if not collect_affected:
        return None
    affected = {(p, g)}
    for s in src:
        affected.add((int(s), HIGH))
        affected.add((int(s), LOW))
    return affected


def snapshot(state: ModelState) -> int:
    """Open a rollback frame; returns a token for :func:`restore`."""
    state._frames.append({"obs_len": len(state.observations), "undo": []})
    return len(state._frames) - 1


def restore(state: ModelState, token: int) -> None:
    """Rewind to the matching snapshot. Frames unwind LIFO; stale tokens fail."""
    if not 0 <= token < len(state._frames):
        raise ValueError(f"stale snapshot token {token}")
    while len(state._frames) > token:
        frame = state._frames.pop()
        for obs in state.observations[frame["obs_len"]:]:
            state.labeled[obs.point, obs.fidelity] = False
            state.labels[obs.point, obs.fidelity] = -1
        del state.observations[frame["obs_len"]:]
        # entries hold pre-change values; replaying newest-first leaves the
        # oldest saved value in place, so no per-frame deduplication is needed
        for name, indexer, saved in reversed(frame["undo"]):
            getattr(state, name)[indexer] = saved
    return None


def _journal_touch(state, p, f, src):
    """Record pre-update values of every cell the update will change."""
    if not state._frames:
        return
    undo = state._frames[-1]["undo"]
    g = other(f)
    undo.append(("pos_cross", (p, g), state.pos_cross[p, g]))
    undo.append(("tot_cross", (p, g), state.tot_cross[p, g]))
    if src.size:
        idx = np.asarray(src)
        for name, fid in (("pos_same", f), ("tot_same", f),
                          ("pos_cross", g), ("tot_cross", g)):
            undo.append((name, (idx, fid), getattr(state, name)[idx, fid].copy()))


def pair_conditional(state: ModelState, pool, point: int, low_label: int) -> Posterior:
    """Exact-copy posterior given a hypothetical surrogate label for the point.

    Equivalent to temporarily observing (point, LOW, low_label) and predicting
    on the exact copy. If the surrogate label is already observed the
    hypothesis adds nothing and the plain posterior is returned.
    """
    if low_label not in (0, 1):
        raise ValueError("low_label must be 0 or 1")
    if not 0 <= point < pool.n:
        raise ValueError(f"unknown point id {point}")
    if state.labeled[point, HIGH]:
        raise ValueError(f"point {point} already labeled on H")
    if state.labeled[point, LOW]:
        return Posterior(state.posterior(point, HIGH), point, HIGH)
    q = state.damping
    num = (state.pos_prior + state.pos_same[point, HIGH]
           + q * (state.pos_cross[point, HIGH] + low_label))
    den = 1.0 + state.tot_same[point, HIGH] + q * (state.tot_cross[point, HIGH] + 1.0)
    return Posterior(num / den, point, HIGH)


def estimate_damping(state: ModelState, pool, grid=DEFAULT_DAMPING_GRID) -> float:
    """Grid maximum-likelihood estimate of the cross-fidelity damping factor.

    The objective is the product over observations of the leave-one-out
    predictive probability of the observed label (a copy never neighbors
    itself, so the plain posterior already leaves the observation out).
    Log-domain accumulation; ties break toward the larger grid value. With
    no observations every value is equally likely and the grid midpoint is
    returned.
    """
    grid = [float(q) for q in grid]
    if not grid:
        raise ValueError("damping grid must be nonempty")
    if any(not 0.0 < q < 1.0 for q in grid):
        raise ValueError("damping grid values must be in (0, 1)")
    if not state.observations:
        return grid[len(grid) // 2]
    pts = np.array([o.point for o in state.observations])
    fids = np.array([o.fidelity for o in state.observations])
    ys = np.array([o.label for o in state.observations], dtype=np.float64)
    ps = state.pos_same[pts, fids]
    ts = state.tot_same[pts, fids]
    pc = state.pos_cross[pts, fids]
    tc = state.tot_cross[pts, fids]
    best_q, best_ll = None, -np.inf
    for q in grid:
        pi = (state.pos_prior + ps + q * pc) / (1.0 + ts + q * tc)
        ll = float(np.sum(np.log(np.where(ys == 1.0, pi, 1.0 - pi))))
        if ll > best_ll or (ll == best_ll and (best_q is None or q > best_q)):
            best_q, best_ll = q, ll
    return best_q
