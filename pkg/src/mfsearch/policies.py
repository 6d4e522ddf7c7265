"""Query-selection policies.

Myopic baselines (greedy, uncertainty, UCB variants) score candidates from
the current posteriors alone. The nonmyopic scores approximate the remaining
search with a terminal batch of exact-oracle queries: the one-stage score
conditions on the putative label and sums the best remaining posteriors; the
two-stage score additionally imagines a small batch of surrogate queries
chosen to improve that terminal batch, and marginalizes their outcomes under
a per-point label-coupling assumption.

A brute-force expectimax over the literal schedule is included as a
reference for tiny instances; it is the ground truth the cheap scores are
tested against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    HIGH,
    LOW,
    ModelState,
    Observation,
    restore,
    snapshot,
    update,
)

POLICY_KINDS = ("greedy", "uncertainty", "mf-ucb", "ug", "ens", "h-ens", "mf-ens")

# nonmyopic policies cap how many candidates are fully scored per iteration
DEFAULT_CAPS = {"mf-ens": (500, 500), "h-ens": (1000, 1000), "ens": (1000, 1000)}


@dataclass(frozen=True)
class Policy:
    """A named selection rule plus its exploration parameters."""

    kind: str
    beta_high: float = 0.001
    beta_low: float = 0.01

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.beta_high < 0 or self.beta_low < 0:
            raise ValueError("UCB exploration weights must be nonnegative")

    @property
    def nonmyopic(self) -> bool:
        return self.kind in ("ens", "h-ens", "mf-ens")

    @property
    def uses_low_fidelity(self) -> bool:
        """Whether surrogate labels are folded into the model during a run."""
        return self.kind != "ens"

    @property
    def default_caps(self):
        return DEFAULT_CAPS.get(self.kind, (None, None))


@dataclass(frozen=True)
class PendingQuery:
    """An issued exact-oracle query whose label has not been revealed yet."""

    point: int
    issued_since: int = 0  # surrogate queries already made while waiting


def exploration_width(k: int, fidelity: int, issued_since: int = 0) -> int:
    """Hypothetical exploratory surrogate-batch size for the next selection.

    Issuing an exact query leaves k surrogate slots before its label lands;
    the j-th surrogate selection of a block still has k - j slots after it.
    """
    if fidelity == HIGH:
        return k
    return max(k - issued_since - 1, 0)


@dataclass
class ScoreContext:
    """Everything a policy needs to score candidates at one iteration."""

    state: ModelState
    pool: object
    fidelity: int
    remaining_h: int
    explore_width: int = 0
    completed: int = 0
    pending: PendingQuery | None = None
    scored_cap: int | None = None
    sample_cap: int | None = None
    rng: np.random.Generator = None
    issued: np.ndarray = None
    branch_cap: int = 10
    mc_samples: int = 128
    sampling: bool = True

    def __post_init__(self):
        if self.fidelity not in (HIGH, LOW):
            raise ValueError("fidelity must be HIGH or LOW")
        if self.remaining_h < 0:
            raise ValueError("remaining exact-query count must be >= 0")
        if (self.pending is not None) != (self.fidelity == LOW):
            raise ValueError("a pending exact query exists iff the surrogate "
                             "oracle is being queried")
        if self.rng is None:
            self.rng = np.random.default_rng(0)
        if self.issued is None:
            issued = self.state.labeled.copy()
            if self.pending is not None:
                issued[self.pending.point, HIGH] = True
            self.issued = issued
        self._overlays = None

    def eligible_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.issued[:, self.fidelity])

    def pending_overlays(self) -> dict:
        """States with the pending exact label committed each way, built once
        per selection and shared across all candidate scores."""
        if self._overlays is None:
            out = {}
            for label in (0, 1):
                st = self.state.clone()
                update(st, self.pool, Observation(self.pending.point, HIGH, label),
                       collect_affected=False)
                out[label] = st
            self._overlays = out
        return self._overlays


@dataclass(frozen=True)
class ExplorationBatch:
    """Surrogate queries hypothesized before the terminal exact batch."""

    points: tuple
    vscores: tuple


@dataclass
class SelectionResult:
    point: int
    score: float
    counters: object = None


# -- elementary scores -------------------------------------------------------


def greedy_score(ctx: ScoreContext, x: int) -> float:
    """Probability the point is positive on the exact oracle."""
    return ctx.state.posterior(x, HIGH)


def uncertainty_score(ctx: ScoreContext, x: int) -> float:
    """Closeness of the queried-fidelity posterior to 1/2 (0 is maximal)."""
    return -abs(ctx.state.posterior(x, ctx.fidelity) - 0.5)


def ucb_score(ctx: ScoreContext, x: int, beta: float) -> float:
    """Posterior plus beta standard deviations of the Bernoulli label."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    p = ctx.state.posterior(x, ctx.fidelity)
    return p + beta * np.sqrt(p * (1.0 - p))


def top_sum(values, count: int) -> float:
    """Sum of the `count` largest entries (everything if count exceeds len)."""
    if count < 0:
        raise ValueError("count must be >= 0")
    arr = np.asarray(values, dtype=np.float64)
    if count == 0 or arr.size == 0:
        return 0.0
    if count >= arr.size:
        return float(arr.sum())
    return float(np.partition(arr, arr.size - count)[arr.size - count:].sum())


def value_v(ctx: ScoreContext, x: int, threshold: float) -> float:
    """Expected improvement over the terminal-batch floor from revealing the
    point's surrogate label.

    Expectation over the surrogate label of max(conditional exact-oracle
    posterior - threshold, 0). Identically zero for points whose exact label
    is already known, since their surrogate label cannot move any belief.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    state = ctx.state
    if state.labeled[x, HIGH]:
        return 0.0
    h0, h1 = state.pair_conditionals()
    pi_l = state.posterior(x, LOW)
    return (pi_l * max(h1[x] - threshold, 0.0)
            + (1.0 - pi_l) * max(h0[x] - threshold, 0.0))


def build_L_batch(ctx: ScoreContext, greedy_batch, threshold: float) -> ExplorationBatch:
    """Top exploratory surrogate queries by expected batch improvement.

    Candidates must be unlabeled on both oracles and outside the current
    terminal batch. Ties break toward lower ids; zero-value candidates still
    fill remaining slots so the branch count stays deterministic.
    """
    members, scores = _exploration_arrays(ctx, np.asarray(list(greedy_batch)),
                                          threshold)
    return ExplorationBatch(tuple(int(m) for m in members),
                            tuple(float(s) for s in scores))


def _exploration_arrays(ctx, batch_ids, threshold, state=None, vectors=None):
    state = ctx.state if state is None else state
    mask = ~state.labeled[:, HIGH] & ~state.labeled[:, LOW]
    if batch_ids.size:
        mask[batch_ids] = False
    ids = np.flatnonzero(mask)
    if ids.size == 0 or ctx.explore_width == 0:
        return ids[:0], np.zeros(0)
    if vectors is None:
        _, h0, h1, pi_l = state.scoring_vectors()
    else:
        _, h0, h1, pi_l = vectors
    v = (pi_l[ids] * np.maximum(h1[ids] - threshold, 0.0)
         + (1.0 - pi_l[ids]) * np.maximum(h0[ids] - threshold, 0.0))
    # stable argsort on descending value keeps ascending-id tie order
    order = np.argsort(-v, kind="stable")[:ctx.explore_width]
    return ids[order], v[order]


# -- nonmyopic scores ---------------------------------------------------------


class _PartialGuard:
    """Carries the incumbent best score and per-branch score bounds so a
    marginalization can abort once it provably cannot win."""

    __slots__ = ("best", "positive", "negative", "aborted")

    def __init__(self, best, positive, negative):
        self.best = best
        self.positive = positive
        self.negative = negative
        self.aborted = False


def hens_score(ctx: ScoreContext, x: int, guard=None):
    """One-stage nonmyopic score: condition on the next label(s), then assume
    the whole remaining exact budget is spent greedily in one batch.

    Exact-oracle candidates earn their immediate posterior plus the expected
    terminal-batch mass; surrogate candidates earn only the information term,
    marginalizing the pending exact label jointly with the putative one.
    Returns None when `guard` proves the score cannot beat the incumbent.
    """
    if ctx.fidelity == HIGH:
        return _score_exact_query(ctx, x, _terminal_batch_mass, guard)
    return _score_surrogate_query(ctx, x, _terminal_batch_mass, guard)


def mfens_score(ctx: ScoreContext, x: int, guard=None):
    """Two-stage nonmyopic score: like the one-stage score, but before the
    terminal batch an exploratory surrogate batch is chosen by expected
    improvement and its labels are marginalized.

    Surrogate-label outcomes update only the paired exact-copy posterior of
    each batch member (labels are otherwise treated as conditionally
    independent after the putative query), so each outcome re-scores the
    terminal batch by swapping member posteriors. Outcome probabilities are
    products of the members' marginal surrogate posteriors.
    """
    if ctx.fidelity == HIGH:
        return _score_exact_query(ctx, x, _explored_batch_mass, guard)
    return _score_surrogate_query(ctx, x, _explored_batch_mass, guard)


def _score_exact_query(ctx, x, rollout, guard):
    state = ctx.state
    pi = state.posterior(x, HIGH)
    if ctx.remaining_h == 0:
        return pi  # final query: immediate reward only, greedy is optimal
    order = ((1, pi), (0, 1.0 - pi)) if pi >= 0.5 else ((0, 1.0 - pi), (1, pi))
    acc = 0.0
    for idx, (y, prob) in enumerate(order):
        token = snapshot(state)
        try:
            update(state, ctx.pool, Observation(x, HIGH, y),
                   collect_affected=False)
            future = rollout(ctx, state)
        finally:
            restore(state, token)
        acc += prob * (float(y) + future)
        if guard is not None and idx == 0:
            y2, prob2 = order[1]
            cap = guard.positive if y2 == 1 else guard.negative
            if acc + prob2 * cap <= guard.best:
                guard.aborted = True
                return None
    return acc


def _score_surrogate_query(ctx, x, rollout, guard):
    if ctx.remaining_h == 0:
        return 0.0
    pending = ctx.pending.point
    pi_p = ctx.state.posterior(pending, HIGH)
    overlays = ctx.pending_overlays()
    branches = []
    for yp in (0, 1):
        p_yp = pi_p if yp == 1 else 1.0 - pi_p
        cond = overlays[yp].posterior(x, LOW)
        for yl in (0, 1):
            branches.append((yp, yl, p_yp * (cond if yl == 1 else 1.0 - cond)))
    branches.sort(key=lambda b: -b[2])
    acc = 0.0
    for idx, (yp, yl, prob) in enumerate(branches):
        state = overlays[yp]
        token = snapshot(state)
        try:
            update(state, ctx.pool, Observation(x, LOW, yl),
                   collect_affected=False)
            future = rollout(ctx, state)
        finally:
            restore(state, token)
        acc += prob * future
        if guard is not None and idx < 3:
            rest = sum(p * (guard.positive if y == 1 else guard.negative)
                       for _, y, p in branches[idx + 1:])
            if acc + rest <= guard.best:
                guard.aborted = True
                return None
    return acc


def _terminal_batch_mass(ctx, state):
    """Sum of the best remaining exact-copy posteriors (one-stage rollout)."""
    if ctx.remaining_h == 0:
        return 0.0
    mask = ~state.labeled[:, HIGH]
    if not mask.any():
        return 0.0
    return top_sum(state.posteriors(HIGH)[mask], ctx.remaining_h)


def _explored_batch_mass(ctx, state):
    """Expected terminal-batch mass after an exploratory surrogate batch.

    Runs under a branch-conditioned state. Chooses the batch by expected
    improvement over the current terminal-batch floor, then marginalizes its
    label assignments, swapping members' exact-copy posteriors per outcome.
    """
    ell = ctx.remaining_h
    if ell == 0:
        return 0.0
    elig = ~state.labeled[:, HIGH]
    if not elig.any():
        return 0.0
    vectors = state.scoring_vectors()
    ids = np.flatnonzero(elig)
    vals = vectors[0][ids]
    order = np.argsort(-vals, kind="stable")
    sorted_ids = ids[order]
    sorted_vals = vals[order]
    batch_vals = sorted_vals[:ell]
    base_mass = float(batch_vals.sum())
    if ctx.explore_width == 0:
        return base_mass
    members, _ = _exploration_arrays(ctx, sorted_ids[:ell], batch_vals[-1],
                                     state=state, vectors=vectors)
    if members.size == 0:
        return base_mass
    # top non-member posteriors; members' entries get swapped per outcome
    prefix_ids = sorted_ids[:ell + members.size]
    keep = np.ones(prefix_ids.size, dtype=bool)
    for m in members:
        keep &= prefix_ids != m
    base_top = sorted_vals[:prefix_ids.size][keep][:ell]
    _, h0, h1, pi_low = vectors
    pi_l = pi_low[members]
    m = members.size
    if m <= ctx.branch_cap:
        assign = (np.arange(1 << m)[:, None] >> np.arange(m)) & 1
        probs = np.where(assign == 1, pi_l, 1.0 - pi_l).prod(axis=1)
    else:
        if not ctx.sampling:
            raise ValueError(
                f"{1 << m} surrogate-label branches exceed the cap of "
                f"2^{ctx.branch_cap} and sampling is disabled")
        assign = (ctx.rng.random((ctx.mc_samples, m)) < pi_l).astype(np.int8)
        probs = np.full(assign.shape[0], 1.0 / assign.shape[0])
    swapped = np.where(assign == 1, h1[members], h0[members])
    stacked = np.concatenate(
        [np.broadcast_to(base_top, (assign.shape[0], base_top.size)), swapped],
        axis=1)
    if ell >= stacked.shape[1]:
        masses = stacked.sum(axis=1)
    else:
        cut = stacked.shape[1] - ell
        masses = np.partition(stacked, cut, axis=1)[:, cut:].sum(axis=1)
    return float(probs @ masses)


# -- exhaustive reference -----------------------------------------------------


def exact_expected_utility(ctx: ScoreContext, schedule, max_points: int = 8,
                           max_depth: int = 4):
    """Optimal first query and value by exhaustive expectimax over the literal
    remaining schedule, marginalizing labels with the real model.

    Exponential in the horizon; guarded to tiny instances and intended as a
    test reference, not a policy.
    """
    n = ctx.pool.n
    depth = schedule.total - ctx.completed
    if n > max_points or depth > max_depth:
        raise ValueError(f"instance too large for exhaustive search "
                         f"(n={n} > {max_points} or depth={depth} > {max_depth})")
    if depth <= 0:
        raise ValueError("no queries remain")
    state, pool = ctx.state, ctx.pool

    def continuation(i):
        if i >= schedule.total:
            return 0.0
        fid = schedule.fidelity_at(i + 1)
        best = -np.inf
        for x in range(n):
            if state.labeled[x, fid]:
                continue
            best = max(best, _expect(x, fid, i))
        return 0.0 if best == -np.inf else best

    def _expect(x, fid, i):
        if fid == HIGH:
            pi = state.posterior(x, HIGH)
            total = 0.0
            for y in (0, 1):
                token = snapshot(state)
                update(state, pool, Observation(x, HIGH, y))
                total += (pi if y == 1 else 1.0 - pi) * (y + continuation(i + 1))
                restore(state, token)
            return total
        pi = state.posterior(x, LOW)
        total = 0.0
        for y in (0, 1):
            token = snapshot(state)
            update(state, pool, Observation(x, LOW, y))
            total += (pi if y == 1 else 1.0 - pi) * continuation(i + 1)
            restore(state, token)
        return total

    fid = ctx.fidelity
    best_x, best_val = None, -np.inf
    eligible = ctx.eligible_ids()
    if eligible.size == 0:
        raise ValueError("no eligible candidates")
    for x in eligible:
        x = int(x)
        if fid == LOW and ctx.pending is not None:
            pend = ctx.pending.point
            pi_p = state.posterior(pend, HIGH)
            val = 0.0
            for yp in (0, 1):
                token = snapshot(state)
                update(state, pool, Observation(pend, HIGH, yp))
                pi_l = state.posterior(x, LOW)
                for yl in (0, 1):
                    inner = snapshot(state)
                    update(state, pool, Observation(x, LOW, yl))
                    prob = ((pi_p if yp == 1 else 1.0 - pi_p)
                            * (pi_l if yl == 1 else 1.0 - pi_l))
                    val += prob * continuation(ctx.completed + 1)
                    restore(state, inner)
                restore(state, token)
        else:
            val = _expect(x, fid, ctx.completed)
        if val > best_val:
            best_x, best_val = x, val
    return best_x, float(best_val)


# -- selection ----------------------------------------------------------------


def _myopic_scores(policy, ctx, ids):
    state = ctx.state
    kind = policy.kind
    if kind == "ens":  # surrogate slots are throwaway for the single-fidelity policy
        return np.zeros(ids.size)
    pi_f = state.posteriors(ctx.fidelity)[ids]
    if kind == "greedy":
        return state.posteriors(HIGH)[ids]
    if kind == "uncertainty":
        return -np.abs(pi_f - 0.5)
    if kind == "mf-ucb":
        beta = policy.beta_high if ctx.fidelity == HIGH else policy.beta_low
        return pi_f + beta * np.sqrt(pi_f * (1.0 - pi_f))
    if kind == "ug":
        if ctx.fidelity == HIGH:
            return state.posteriors(HIGH)[ids]
        return -np.abs(pi_f - 0.5)
    raise ValueError(f"unknown myopic policy {kind!r}")


def select_with_info(policy: Policy, ctx: ScoreContext) -> SelectionResult:
    """Pick the next query; returns the point plus score and prune counters."""
    ids = ctx.eligible_ids()
    if ids.size == 0:
        raise ValueError("no eligible candidates on the queried fidelity")
    myopic = not policy.nonmyopic or (policy.kind == "ens" and ctx.fidelity == LOW)
    if myopic:
        scores = _myopic_scores(policy, ctx, ids)
        pick = np.lexsort((ids, -scores))[0]
        return SelectionResult(int(ids[pick]), float(scores[pick]), None)
    from .pruning import lazy_argmax, score_bounds_all

    scorer = mfens_score if policy.kind == "mf-ens" else hens_score
    bounds = score_bounds_all(ctx, ids, policy.kind)
    cap_u, cap_s = policy.default_caps
    if ctx.scored_cap is not None:
        cap_u = ctx.scored_cap
    if ctx.sample_cap is not None:
        cap_s = ctx.sample_cap
    point, best, counters = lazy_argmax(ctx, scorer, bounds, cap_u, cap_s, ctx.rng)
    return SelectionResult(point, best, counters)


def select_query(policy: Policy, ctx: ScoreContext) -> int:
    return select_with_info(policy, ctx).point
