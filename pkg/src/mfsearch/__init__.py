"""Nonmyopic multifidelity active search.

A pool of points hides a rare positive class. Two oracles reveal labels: an
exact, slow one and a noisy, fast one running k times faster in parallel.
This package provides the shared multifidelity k-NN classifier, the policy
family from myopic baselines up to two-stage nonmyopic rollout scores,
branch-and-bound pruned selection, and a benchmark harness that reproduces
target-count tables, progress curves, and pruning statistics.
"""

from .model import (
    DEFAULT_DAMPING_GRID,
    HIGH,
    LOW,
    ModelState,
    Observation,
    Posterior,
    estimate_damping,
    pair_conditional,
    predict,
    restore,
    snapshot,
    update,
)
from .policies import (
    ExplorationBatch,
    PendingQuery,
    Policy,
    ScoreContext,
    build_L_batch,
    exact_expected_utility,
    exploration_width,
    greedy_score,
    hens_score,
    mfens_score,
    select_query,
    select_with_info,
    top_sum,
    ucb_score,
    uncertainty_score,
    value_v,
)
from .pool import (
    CacheError,
    DatasetSpec,
    PointPool,
    SyntheticParams,
    build_neighbor_graph,
    cache_graph,
    load_cached,
    load_pool,
    synth_pool,
)
from .pruning import (
    BoundEntry,
    PruneCounters,
    lazy_argmax,
    optimistic_posterior,
    score_bounds,
    score_bounds_all,
)
from .simulate import (
    GroundTruth,
    RunTrace,
    Schedule,
    build_schedule,
    context_at,
    init_observations,
    make_ground_truth,
    remaining_high,
    run_experiment,
    synthesize_low_fidelity,
)
from .harness import (
    ExperimentMatrix,
    Summary,
    SummaryRow,
    emit_series,
    paired_t_test,
    read_trace,
    run_matrix,
    summarize,
    write_trace,
)

__version__ = "0.1.0"
