"""Experiment-matrix runner, trace files, aggregation, and statistics.

Traces are line-delimited JSON: a config line, one line per iteration, and a
final line that doubles as a completeness marker. Every emitted number is
reproducible from the trace files alone; aggregation never consults live
state. Cells of a matrix (dataset x policy x noise x speed ratio x seed) are
independent jobs and can run in separate processes.
"""

from __future__ import annotations

import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .model import DEFAULT_DAMPING_GRID
from .policies import DEFAULT_CAPS, Policy
from .pool import (
    DatasetSpec,
    SyntheticParams,
    cache_graph,
    load_cached,
    load_pool,
)
from .simulate import GroundTruth, RunTrace, run_experiment, synthesize_low_fidelity

P_VALUE_FLOOR = 1e-13  # sentinel for zero-variance nonzero-mean differences


class ConfigError(Exception):
    """Raised for malformed matrix configuration."""


# -- trace files --------------------------------------------------------------


def write_trace(trace: RunTrace, path) -> None:
    """Atomically write a trace as JSONL (config, records, final marker)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"kind": "config", **trace.config,
                         "seed_point": trace.seed_point})]
    for r in trace.records:
        lines.append(json.dumps({
            "kind": "record", "iteration": r.iteration, "fidelity": r.fidelity,
            "point": r.point, "score": r.score, "posterior": r.posterior,
            "label": r.label, "cumulative_utility": r.cumulative_utility,
            "damping": r.damping, "counters": r.counters,
            "elapsed": r.elapsed,
        }))
    lines.append(json.dumps({"kind": "final", "final_utility": trace.final_utility,
                             "records": len(trace.records)}))
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


@dataclass
class StoredTrace:
    """A trace as read back from disk."""

    config: dict
    records: list[dict]
    final_utility: int

    @property
    def cell(self) -> tuple:
        c = self.config
        return (c.get("dataset", "?"), c["policy"], c["flip_fraction"], c["k"])

    @property
    def seed(self) -> int:
        return self.config["seed"]

    def utility_series(self):
        return np.array([r["cumulative_utility"] for r in self.records])

    def high_posteriors(self):
        return np.array([r["posterior"] for r in self.records
                         if r["fidelity"] == "H"])


def read_trace(path) -> StoredTrace:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows or rows[0].get("kind") != "config":
        raise ValueError(f"{path}: missing config line")
    if rows[-1].get("kind") != "final":
        raise ValueError(f"{path}: incomplete trace")
    records = [r for r in rows[1:-1] if r.get("kind") == "record"]
    if len(records) != rows[-1]["records"]:
        raise ValueError(f"{path}: truncated record block")
    return StoredTrace(config=rows[0], records=records,
                       final_utility=rows[-1]["final_utility"])


def trace_complete(path) -> bool:
    try:
        read_trace(path)
        return True
    except (OSError, ValueError, json.JSONDecodeError, KeyError):
        return False


# -- matrix -------------------------------------------------------------------


@dataclass
class ExperimentMatrix:
    """Cross product of datasets, policies, noise levels, speed ratios, seeds."""

    datasets: dict  # name -> DatasetSpec
    policies: list[str]
    thetas: list[float]
    ks: list[int]
    t: int
    seeds: list[int]
    output: Path
    caps: dict = field(default_factory=dict)  # policy -> (u, s)
    pos_prior: float = 0.05
    damping_grid: tuple = DEFAULT_DAMPING_GRID

    def __post_init__(self):
        self.output = Path(self.output)
        if not (self.datasets and self.policies and self.thetas and self.ks
                and self.seeds):
            raise ConfigError("every matrix axis must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.t < 1:
            raise ConfigError("exact budget t must be >= 1")
        for name in self.policies:
            Policy(name)  # validates

    @classmethod
    def from_config(cls, cfg: dict, output=None) -> "ExperimentMatrix":
        try:
            datasets = {}
            for entry in cfg["datasets"]:
                name = entry["name"]
                if "synthetic" in entry:
                    src = SyntheticParams(**entry["synthetic"])
                else:
                    src = entry["csv"]
                datasets[name] = DatasetSpec(
                    source=src,
                    neighbors=int(entry.get("K", cfg.get("model", {}).get("K", 50))),
                    metric=entry.get("metric", "euclidean"),
                    label_column=entry.get("label", "label"),
                )
            model = cfg.get("model", {})
            caps = {}
            for name, pair in cfg.get("caps", {}).items():
                caps[name] = (None if pair[0] is None else int(pair[0]),
                              None if pair[1] is None else int(pair[1]))
            return cls(
                datasets=datasets,
                policies=list(cfg["policies"]),
                thetas=[float(v) for v in cfg["thetas"]],
                ks=[int(v) for v in cfg["ks"]],
                t=int(cfg["t"]),
                seeds=[int(s) for s in cfg["seeds"]],
                output=Path(output or cfg["output"]),
                caps=caps,
                pos_prior=float(model.get("gamma", 0.05)),
                damping_grid=tuple(model.get("q_grid", DEFAULT_DAMPING_GRID)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad matrix config: {exc}") from exc

    def trace_path(self, dataset, policy, theta, k, seed) -> Path:
        name = f"{dataset}__{policy}__theta{theta:g}__k{k}__seed{seed}.jsonl"
        return self.output / "traces" / name

    def jobs(self):
        for dname in self.datasets:
            for policy in self.policies:
                for theta in self.thetas:
                    for k in self.ks:
                        for seed in self.seeds:
                            yield (dname, policy, theta, k, seed)


def _pool_cache_paths(matrix, dname):
    base = matrix.output / "pools"
    return base / f"{dname}.npz", base / f"{dname}.labels.npy"


def _ensure_pool(matrix: ExperimentMatrix, dname: str):
    """Build (or reuse) the dataset's pool cache; returns (pool path, labels)."""
    pool_path, label_path = _pool_cache_paths(matrix, dname)
    if pool_path.exists() and label_path.exists():
        try:
            load_cached(pool_path)
            return pool_path, np.load(label_path)
        except Exception:
            pass  # stale or corrupt: rebuild below
    pool, labels = load_pool(matrix.datasets[dname])
    pool_path.parent.mkdir(parents=True, exist_ok=True)
    cache_graph(pool, pool_path)
    np.save(label_path, labels)
    return pool_path, labels


def _truth_for(labels, theta, seed) -> GroundTruth:
    rng = np.random.default_rng([int(seed), int(round(theta * 1_000_000)), 77])
    return GroundTruth(np.asarray(labels, dtype=np.int8),
                       synthesize_low_fidelity(labels, theta, rng), theta)


def _run_job(args):
    (dname, policy_name, theta, k, seed, t, pool_path, label_path,
     trace_path, caps, pos_prior, damping_grid) = args
    pool = load_cached(pool_path)
    labels = np.load(label_path)
    truth = _truth_for(labels, theta, seed)
    policy = Policy(policy_name)
    trace = run_experiment(policy, pool, truth, t=t, k=k, seed=seed,
                           caps=caps, pos_prior=pos_prior,
                           damping_grid=damping_grid)
    trace.config["dataset"] = dname
    write_trace(trace, trace_path)
    return str(trace_path)


def run_matrix(matrix: ExperimentMatrix, workers: int = 1) -> list[Path]:
    """Run every incomplete cell of the matrix; returns all trace paths.

    Existing complete traces are skipped, so an interrupted run resumes where
    it stopped. Jobs are independent and may run in parallel processes.
    """
    pool_info = {d: _pool_cache_paths(matrix, d) for d in matrix.datasets}
    for dname in matrix.datasets:
        _ensure_pool(matrix, dname)
    paths, todo = [], []
    for (dname, policy, theta, k, seed) in matrix.jobs():
        path = matrix.trace_path(dname, policy, theta, k, seed)
        paths.append(path)
        if trace_complete(path):
            continue
        caps = matrix.caps.get(policy, DEFAULT_CAPS.get(policy, (None, None)))
        pool_path, label_path = pool_info[dname]
        todo.append((dname, policy, theta, k, seed, matrix.t,
                     str(pool_path), str(label_path), str(path), caps,
                     matrix.pos_prior, matrix.damping_grid))
    if workers <= 1:
        for job in todo:
            _run_job(job)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            list(ex.map(_run_job, todo))
    return paths


# -- aggregation ---------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    dataset: str
    policy: str
    theta: float
    k: int
    mean: float
    se: float | None
    repeats: int


@dataclass
class Summary:
    rows: list[SummaryRow]
    utility_series: dict      # cell -> (mean per iteration, se per iteration)
    posterior_series: dict    # cell -> mean posterior at exact-query times
    difference_series: dict   # (cell_a, cell_b) -> mean paired difference
    pruning: dict             # cell -> coverage / prune-rate stats
    utilities: dict           # cell -> {seed: final utility}


def _cell_key(cell) -> str:
    dataset, policy, theta, k = cell
    return f"{dataset}__{policy}__theta{theta:g}__k{k}"


def summarize(traces) -> Summary:
    """Aggregate traces into per-cell rows, series, and pruning stats.

    `traces` may be paths or StoredTrace objects. Traces in one cell must
    share (t, k, n); mixed configurations are rejected.
    """
    stored = [t if isinstance(t, StoredTrace) else read_trace(t) for t in traces]
    cells: dict[tuple, list[StoredTrace]] = {}
    for tr in stored:
        cells.setdefault(tr.cell, []).append(tr)
    rows = []
    utility_series, posterior_series, pruning, utilities = {}, {}, {}, {}
    for cell, group in sorted(cells.items(), key=lambda kv: _cell_key(kv[0])):
        shapes = {(g.config["t"], g.config["k"], g.config["n"]) for g in group}
        if len(shapes) > 1:
            raise ValueError(f"cell {cell} mixes configurations: {shapes}")
        group.sort(key=lambda g: g.seed)
        finals = np.array([g.final_utility for g in group], dtype=float)
        se = (float(finals.std(ddof=1) / np.sqrt(len(finals)))
              if len(finals) >= 2 else None)
        rows.append(SummaryRow(cell[0], cell[1], cell[2], cell[3],
                               float(finals.mean()), se, len(finals)))
        series = np.stack([g.utility_series() for g in group])
        utility_series[cell] = (series.mean(axis=0),
                                series.std(axis=0, ddof=1) / np.sqrt(len(group))
                                if len(group) >= 2 else np.zeros(series.shape[1]))
        posts = np.stack([g.high_posteriors() for g in group])
        posterior_series[cell] = posts.mean(axis=0)
        utilities[cell] = {g.seed: g.final_utility for g in group}
        pruning[cell] = _pruning_stats(group)
    difference_series = {}
    for cell_a in cells:
        for cell_b in cells:
            if cell_a[1] >= cell_b[1]:
                continue
            if (cell_a[0], cell_a[2], cell_a[3]) != (cell_b[0], cell_b[2], cell_b[3]):
                continue
            pairs = _paired_series(cells[cell_a], cells[cell_b])
            if pairs is not None:
                difference_series[(cell_a, cell_b)] = pairs
    return Summary(rows=rows, utility_series=utility_series,
                   posterior_series=posterior_series,
                   difference_series=difference_series, pruning=pruning,
                   utilities=utilities)


def _paired_series(group_a, group_b):
    by_seed_a = {g.seed: g for g in group_a}
    by_seed_b = {g.seed: g for g in group_b}
    shared = sorted(set(by_seed_a) & set(by_seed_b))
    if not shared:
        return None
    diffs = np.stack([by_seed_a[s].utility_series()
                      - by_seed_b[s].utility_series() for s in shared])
    return diffs.mean(axis=0)


def _pruning_stats(group):
    """Coverage rate plus prune fractions over fully covered iterations."""
    iters = covered = 0
    total_frac, partial_frac = [], []
    for g in group:
        for r in g.records:
            c = r.get("counters")
            if not c:
                continue
            iters += 1
            if c["covered"]:
                covered += 1
                total_frac.append(c["total_pruned"] / c["candidates"])
                partial_frac.append(c["partial_pruned"] / c["candidates"])
    if iters == 0:
        return None
    return {
        "iterations": iters,
        "coverage_rate": covered / iters,
        "total_pruned_pct": 100.0 * float(np.mean(total_frac)) if total_frac else None,
        "partial_pruned_pct": 100.0 * float(np.mean(partial_frac)) if partial_frac else None,
    }


def paired_t_test(a, b):
    """Two-sided paired t-test on per-seed utilities.

    Degenerate cases: identical samples give (0, 1); zero-variance nonzero-mean
    differences report the sentinel p < 1e-12.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        if d.mean() == 0.0:
            return 0.0, 1.0
        return float(np.sign(d.mean()) * np.inf), P_VALUE_FLOOR
    tstat = d.mean() / (sd / np.sqrt(d.size))
    p = 2.0 * float(stats.t.sf(abs(tstat), d.size - 1))
    return float(tstat), p


# -- emission -------------------------------------------------------------------


def emit_series(summary: Summary, outdir, prefix="series") -> list[Path]:
    """Write per-series CSV files plus one machine-readable summary document.

    Series CSVs have the stable schema (iteration, value, se); the summary
    JSON carries rows, pruning stats, and pointers to the CSV files.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def write_csv(name, values, ses=None):
        path = outdir / f"{prefix}__{name}.csv"
        with open(path, "w") as fh:
            fh.write("iteration,value,se\n")
            for i, v in enumerate(values, start=1):
                se = "" if ses is None else f"{ses[i - 1]:.10g}"
                fh.write(f"{i},{v:.10g},{se}\n")
        written.append(path)
        return path.name

    doc = {"rows": [], "pruning": {}, "series_files": {}}
    for row in summary.rows:
        doc["rows"].append({
            "dataset": row.dataset, "policy": row.policy, "theta": row.theta,
            "k": row.k, "mean_targets": row.mean, "se": row.se,
            "repeats": row.repeats,
        })
    for cell, (mean, se) in summary.utility_series.items():
        key = _cell_key(cell)
        doc["series_files"][f"utility__{key}"] = write_csv(
            f"utility__{key}", mean, se)
    for cell, means in summary.posterior_series.items():
        key = _cell_key(cell)
        doc["series_files"][f"h_posterior__{key}"] = write_csv(
            f"h_posterior__{key}", means)
    for (cell_a, cell_b), diff in summary.difference_series.items():
        key = f"{_cell_key(cell_a)}__minus__{_cell_key(cell_b)}"
        doc["series_files"][f"difference__{key}"] = write_csv(
            f"difference__{key}", diff)
    for cell, stats_ in summary.pruning.items():
        if stats_ is not None:
            doc["pruning"][_cell_key(cell)] = stats_
    summary_path = outdir / f"{prefix}__summary.json"
    with open(summary_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    written.append(summary_path)
    return written


def read_series(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an emitted series CSV back into (values, ses)."""
    values, ses = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "iteration,value,se":
            raise ValueError(f"{path}: unexpected schema {header!r}")
        for line in fh:
            _, value, se = line.strip().split(",")
            values.append(float(value))
            ses.append(float(se) if se else np.nan)
    return np.array(values), np.array(ses)
