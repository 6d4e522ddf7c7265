"""Query schedules, surrogate-oracle synthesis, and the search loop.

The two oracles run in parallel: each exact query takes as long as k
surrogate queries, so between consecutive exact-query issue points the
policy makes k surrogate selections while the exact label is still pending.
An exact label is revealed to the model just before the next exact query is
issued; surrogate labels reveal immediately.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import (
    DEFAULT_DAMPING_GRID,
    FIDELITY_NAMES,
    HIGH,
    LOW,
    ModelState,
    Observation,
    estimate_damping,
    update,
)
from .policies import (
    PendingQuery,
    Policy,
    ScoreContext,
    exploration_width,
    select_with_info,
)


@dataclass(frozen=True)
class Schedule:
    """Fidelity sequence for an exact budget of t with speed ratio k.

    Exact queries are issued at positions 1, k+2, 2k+3, ...; the final
    position is always an exact query, so the total length is t + k*t - k
    (trailing surrogate queries could not influence the utility).
    """

    t: int
    k: int

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("exact-query budget must be >= 1")
        if self.k < 0:
            raise ValueError("speed ratio must be >= 0")

    @property
    def total(self) -> int:
        return self.t + self.k * self.t - self.k

    def fidelity_at(self, i: int) -> int:
        """Fidelity of the i-th query, 1-based."""
        if not 1 <= i <= self.total:
            raise ValueError(f"iteration {i} outside [1, {self.total}]")
        return HIGH if (i - 1) % (self.k + 1) == 0 else LOW

    def high_positions(self) -> list[int]:
        return [1 + j * (self.k + 1) for j in range(self.t)]


def build_schedule(t: int, k: int) -> Schedule:
    return Schedule(t, k)


def remaining_high(schedule: Schedule, completed: int) -> int:
    """Exact queries assumed to remain after the upcoming one: the lookahead
    budget floor((T - i - 1) / (k + 1)).

    Note this undercounts the true remaining count by one at some surrogate
    iterations; it is used verbatim as the lookahead horizon.
    """
    if not 0 <= completed < schedule.total:
        raise ValueError(f"completed count {completed} outside "
                         f"[0, {schedule.total})")
    return (schedule.total - completed - 1) // (schedule.k + 1)


@dataclass(frozen=True)
class GroundTruth:
    """True labels for both oracles plus the noise parameters that made them."""

    y_high: np.ndarray
    y_low: np.ndarray
    flip_fraction: float

    def __post_init__(self):
        if self.y_high.shape != self.y_low.shape:
            raise ValueError("label vectors must align")
        if int(self.y_high.sum()) != int(self.y_low.sum()):
            raise ValueError("surrogate labels must preserve the positive count")

    @property
    def prevalence(self) -> float:
        return float(self.y_high.mean())


def synthesize_low_fidelity(y_high, flip_fraction: float, rng) -> np.ndarray:
    """Surrogate labels from exact labels by symmetric label flipping.

    A round(flip_fraction * positives) subset of positives flips to negative
    and an equally sized random subset of negatives flips to positive, giving
    the surrogate oracle a false positive rate of flip_fraction and a false
    negative rate of flip_fraction * r / (1 - r) at prevalence r.
    """
    if not 0.0 <= flip_fraction < 1.0:
        raise ValueError("flip fraction must be in [0, 1)")
    y_high = np.asarray(y_high, dtype=np.int8)
    positives = np.flatnonzero(y_high == 1)
    negatives = np.flatnonzero(y_high == 0)
    flips = int(np.floor(flip_fraction * positives.size + 0.5))  # round half up
    if flips > negatives.size:
        raise ValueError(f"need {flips} negatives to flip, "
                         f"only {negatives.size} available")
    y_low = y_high.copy()
    if flips:
        down = rng.choice(positives, size=flips, replace=False)
        up = rng.choice(negatives, size=flips, replace=False)
        y_low[down] = 0
        y_low[up] = 1
    return y_low


def make_ground_truth(y_high, flip_fraction, rng) -> GroundTruth:
    y_high = np.asarray(y_high, dtype=np.int8)
    return GroundTruth(y_high, synthesize_low_fidelity(y_high, flip_fraction, rng),
                       flip_fraction)


def init_observations(truth: GroundTruth, rng) -> list[Observation]:
    """Initial training data: one random target positive on both oracles."""
    eligible = np.flatnonzero((truth.y_high == 1) & (truth.y_low == 1))
    if eligible.size == 0:
        raise ValueError("no point is positive on both oracles")
    x = int(rng.choice(eligible))
    return [Observation(x, HIGH, 1), Observation(x, LOW, 1)]


@dataclass
class IterationRecord:
    """One row of a run trace."""

    iteration: int
    fidelity: str
    point: int
    score: float
    posterior: float
    label: int
    cumulative_utility: int
    damping: float
    counters: dict | None
    elapsed: float

    def canonical(self) -> tuple:
        """Everything except wall time, for determinism comparisons."""
        return (self.iteration, self.fidelity, self.point, self.score,
                self.posterior, self.label, self.cumulative_utility,
                self.damping,
                tuple(sorted(self.counters.items())) if self.counters else None)


@dataclass
class RunTrace:
    records: list[IterationRecord]
    config: dict
    final_utility: int
    seed_point: int

    def utility_series(self) -> np.ndarray:
        return np.array([r.cumulative_utility for r in self.records])

    def fingerprint(self) -> tuple:
        """Timing-free canonical form; equal fingerprints mean equal runs."""
        cfg = tuple(sorted((k, str(v)) for k, v in self.config.items()))
        return (cfg, self.seed_point, self.final_utility,
                tuple(r.canonical() for r in self.records))


def context_at(state, pool, schedule: Schedule, completed: int,
               pending: PendingQuery | None = None, **kwargs) -> ScoreContext:
    """ScoreContext for the (completed+1)-th query of a schedule."""
    fid = schedule.fidelity_at(completed + 1)
    return ScoreContext(
        state=state,
        pool=pool,
        fidelity=fid,
        remaining_h=remaining_high(schedule, completed),
        explore_width=exploration_width(
            schedule.k, fid, pending.issued_since if pending else 0),
        completed=completed,
        pending=pending,
        **kwargs,
    )


def run_experiment(policy: Policy, pool, truth: GroundTruth, t: int, k: int,
                   seed: int, caps=None, pos_prior: float = 0.05,
                   damping_grid=DEFAULT_DAMPING_GRID) -> RunTrace:
    """Walk the full schedule once and return the per-iteration trace.

    Pending bookkeeping: the label of an exact query issued at iteration i is
    revealed just before iteration i + k + 1; the k surrogate selections in
    between marginalize it. The damping factor is re-estimated before every
    selection. Utility counts exact-oracle positives among queried points
    (the seeded initial observation is given, not queried, and is excluded).
    """
    schedule = build_schedule(t, k)
    n = pool.n
    if t > n - 1 or schedule.total - t > n - 1:
        raise ValueError("budget exceeds the pool: not enough unlabeled points")
    rng = np.random.default_rng(seed)
    state = ModelState(n, pos_prior=pos_prior)
    seed_obs = init_observations(truth, rng)
    for obs in seed_obs:
        update(state, pool, obs)
    issued = state.labeled.copy()
    cap_u, cap_s = caps if caps is not None else (None, None)

    records = []
    pending = None  # (point, true label, issue iteration)
    utility = 0
    for i in range(1, schedule.total + 1):
        started = time.perf_counter()
        fid = schedule.fidelity_at(i)
        if fid == HIGH and pending is not None:
            update(state, pool, Observation(pending[0], HIGH, pending[1]))
            pending = None
        state.damping = estimate_damping(state, pool, damping_grid)
        if fid == HIGH:
            pend_info = None
        else:
            pend_info = PendingQuery(pending[0], issued_since=i - 1 - pending[2])
        ctx = ScoreContext(
            state=state,
            pool=pool,
            fidelity=fid,
            remaining_h=remaining_high(schedule, i - 1),
            explore_width=exploration_width(
                k, fid, pend_info.issued_since if pend_info else 0),
            completed=i - 1,
            pending=pend_info,
            scored_cap=cap_u,
            sample_cap=cap_s,
            rng=rng,
            issued=issued.copy(),
        )
        result = select_with_info(policy, ctx)
        x = result.point
        if issued[x, fid]:
            raise RuntimeError(f"policy {policy.kind} re-queried point {x} on "
                               f"{FIDELITY_NAMES[fid]}")
        issued[x, fid] = True
        posterior_at_query = state.posterior(x, fid)
        if fid == HIGH:
            label = int(truth.y_high[x])
            pending = (x, label, i)
            utility += label
        else:
            label = int(truth.y_low[x])
            if policy.uses_low_fidelity:
                update(state, pool, Observation(x, LOW, label))
        counters = None
        if result.counters is not None:
            c = result.counters
            counters = {
                "candidates": c.candidates,
                "total_pruned": c.total_pruned,
                "partial_pruned": c.partial_pruned,
                "fully_scored": c.fully_scored,
                "skipped_by_cap": c.skipped_by_cap,
                "covered": c.covered,
            }
        records.append(IterationRecord(
            iteration=i,
            fidelity=FIDELITY_NAMES[fid],
            point=x,
            score=float(result.score),
            posterior=float(posterior_at_query),
            label=label,
            cumulative_utility=utility,
            damping=float(state.damping),
            counters=counters,
            elapsed=time.perf_counter() - started,
        ))
    config = {
        "policy": policy.kind,
        "t": t,
        "k": k,
        "seed": seed,
        "flip_fraction": truth.flip_fraction,
        "pos_prior": pos_prior,
        "caps": (cap_u, cap_s),
        "n": n,
    }
    return RunTrace(records=records, config=config, final_utility=utility,
                    seed_point=seed_obs[0].point)
