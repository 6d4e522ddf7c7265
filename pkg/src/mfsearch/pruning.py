"""Branch-and-bound machinery for nonmyopic candidate scoring.

Scores are expensive (each one conditions the model and marginalizes label
branches), but cheap optimistic upper bounds exist: inject a few
maximum-weight positive observations into every posterior and sum the best.
Candidates are then visited in descending bound order; a candidate whose
bound cannot beat the incumbent is skipped outright (total pruning), and a
candidate whose partially computed marginalization plus complementary bounds
cannot win is abandoned mid-score (partial pruning). Two caps keep worst-case
iterations bounded: after `scored_cap` full evaluations only a random subset
of at most `sample_cap` unpruned candidates is considered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HIGH, LOW
from .policies import ScoreContext, _PartialGuard, top_sum


@dataclass(frozen=True)
class BoundEntry:
    """Upper-bound decomposition for one candidate.

    bound = putative_prob * positive_bound + (1 - putative_prob) * negative_bound,
    where the two pieces bound the score conditioned on a positive/negative
    putative label.
    """

    point: int
    bound: float
    positive_bound: float
    negative_bound: float
    putative_prob: float


@dataclass
class PruneCounters:
    """Per-selection accounting; conserved: the four classes partition the
    candidate set, and covered means no candidate was skipped by the cap."""

    candidates: int = 0
    total_pruned: int = 0
    partial_pruned: int = 0
    fully_scored: int = 0
    skipped_by_cap: int = 0

    @property
    def covered(self) -> bool:
        return self.skipped_by_cap == 0


def optimistic_posterior(state, pool, x: int, extra: int) -> float:
    """Posterior the exact copy would reach after `extra` additional positive
    observations, each arriving at the maximum possible incoming weight.

    Nondecreasing in `extra`; with the monotone-response property this
    dominates any state reachable by that many label injections.
    """
    if extra < 0:
        raise ValueError("extra must be >= 0")
    w = max(1.0, pool.max_weight) * extra
    q = state.damping
    num = (state.pos_prior + state.pos_same[x, HIGH]
           + q * state.pos_cross[x, HIGH] + w)
    den = 1.0 + state.tot_same[x, HIGH] + q * state.tot_cross[x, HIGH] + w
    return num / den


def _optimistic_vector(state, pool, ids, extra):
    w = max(1.0, pool.max_weight) * extra
    q = state.damping
    num = (state.pos_prior + state.pos_same[ids, HIGH]
           + q * state.pos_cross[ids, HIGH] + w)
    den = 1.0 + state.tot_same[ids, HIGH] + q * state.tot_cross[ids, HIGH] + w
    return num / den


def _branch_injections(ctx: ScoreContext, policy_kind: str):
    """How many optimistic positives each branch side must absorb.

    Besides the putative label itself, a branch can inject the pending exact
    label (surrogate iterations) and, for the two-stage score, one surrogate
    label onto each candidate's own pair edge.
    """
    explore = ctx.explore_width if policy_kind == "mf-ens" else 0
    extra = (1 if explore > 0 else 0) + (1 if ctx.pending is not None else 0)
    return 1 + extra, extra  # positive-putative side, negative-putative side


def _excluding_top_sums(values, count, exclude_values):
    """top_sum(values minus one instance of v, count) for each v in
    exclude_values; every v must occur in values."""
    if count == 0:
        return np.zeros(len(exclude_values))
    srt = np.sort(values)[::-1]
    if srt.size <= count:
        return srt.sum() - exclude_values
    s_top = srt[:count].sum()
    cutoff = srt[count - 1]
    slide_in = srt[count]
    return np.where(exclude_values >= cutoff,
                    s_top - exclude_values + slide_in,
                    s_top)


def score_bounds(ctx: ScoreContext, x: int, policy_kind: str = "mf-ens") -> BoundEntry:
    """Upper-bound decomposition for a single candidate."""
    entries = score_bounds_all(ctx, np.asarray([x]), policy_kind)
    return entries[0]


def score_bounds_all(ctx: ScoreContext, candidates, policy_kind: str = "mf-ens"):
    """Vectorized bound construction for every candidate in one pass.

    The terminal-batch bound sums the best optimistic posteriors over points
    still unlabeled on the exact oracle (excluding the pending point, whose
    label is committed inside every branch, and the candidate itself for
    exact-oracle queries).
    """
    state, pool = ctx.state, ctx.pool
    candidates = np.asarray(candidates, dtype=np.int64)
    ell = ctx.remaining_h
    j_pos, j_neg = _branch_injections(ctx, policy_kind)
    mask = ~state.labeled[:, HIGH]
    if ctx.pending is not None:
        mask[ctx.pending.point] = False
    batch_ids = np.flatnonzero(mask)
    opt_pos = _optimistic_vector(state, pool, batch_ids, j_pos)
    opt_neg = _optimistic_vector(state, pool, batch_ids, j_neg)
    if ctx.fidelity == HIGH:
        pi = state.posteriors(HIGH)[candidates]
        pos_index = np.searchsorted(batch_ids, candidates)
        u_bar = 1.0 + _excluding_top_sums(opt_pos, ell, opt_pos[pos_index])
        u_lower = _excluding_top_sums(opt_neg, ell, opt_neg[pos_index])
    else:
        pi = state.posteriors(LOW)[candidates]
        u_bar = np.full(candidates.size, top_sum(opt_pos, ell))
        u_lower = np.full(candidates.size, top_sum(opt_neg, ell))
    bound = pi * u_bar + (1.0 - pi) * u_lower
    return [BoundEntry(int(c), float(b), float(ub), float(lb), float(p))
            for c, b, ub, lb, p in zip(candidates, bound, u_bar, u_lower, pi)]


def lazy_argmax(ctx: ScoreContext, scorer, bounds, scored_cap=None,
                sample_cap=None, rng=None):
    """Bound-sorted lazy evaluation with total and partial pruning.

    Visits candidates in descending bound order (ties by lower id), skipping
    any whose bound cannot strictly beat the incumbent. After `scored_cap`
    full evaluations, a uniform random subset of at most `sample_cap` of the
    remaining unpruned candidates is evaluated and the incumbent returned.

    Returns (best point, best score, counters).
    """
    if not bounds:
        raise ValueError("empty candidate list")
    rng = ctx.rng if rng is None else rng
    entries = sorted(bounds, key=lambda e: (-e.bound, e.point))
    counters = PruneCounters(candidates=len(entries))
    best_point, best_score = None, -np.inf

    def visit(entry):
        nonlocal best_point, best_score
        if entry.bound <= best_score:  # equality cannot strictly improve
            counters.total_pruned += 1
            return
        guard = _PartialGuard(best_score, entry.positive_bound,
                              entry.negative_bound)
        score = scorer(ctx, entry.point, guard)
        if score is None:
            counters.partial_pruned += 1
            return
        counters.fully_scored += 1
        if score > best_score or (score == best_score
                                  and entry.point < best_point):
            best_score = score
            best_point = entry.point

    cutoff = len(entries)
    for pos, entry in enumerate(entries):
        if scored_cap is not None and counters.fully_scored >= scored_cap:
            cutoff = pos
            break
        visit(entry)
    remaining = entries[cutoff:]
    if remaining:
        alive = [e for e in remaining if e.bound > best_score]
        counters.total_pruned += len(remaining) - len(alive)
        take = len(alive) if sample_cap is None else min(sample_cap, len(alive))
        if take < len(alive):
            picked = rng.choice(len(alive), size=take, replace=False)
            chosen = [alive[i] for i in sorted(picked)]
            counters.skipped_by_cap += len(alive) - take
        else:
            chosen = alive
        for entry in chosen:
            visit(entry)
    return best_point, float(best_score), counters
