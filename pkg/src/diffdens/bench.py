"""Experiment harness: KL metric, parameter sweeps, per-sample timing.

The model-quality metric is the Monte-Carlo KL upper bound: fresh points
are drawn from the analytic mixture (never training points) and the mean of
log p_true(x) - logp_est(x) is reported with its standard error across
points. Sweeps train one model per grid cell per seed and append one CSV
row per run; completed rows are skipped on re-run, so an interrupted sweep
resumes where it stopped.
"""

from __future__ import annotations

import csv
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn, pathint, pfode
from .errors import DegenerateEstimateError, InvalidArgumentError, SchemaError
from .gmm import GaussianMixture, benchmark_mixture, gmm_log_density, gmm_sample
from .pathint import EstimateConfig, LogDensityEstimate
from .pfode import OdeConfig
from .rng import derive_key
from .sde import DiffusionProcess
from .train import TrainConfig, train

log = logging.getLogger(__name__)

RESULTS_COLUMNS = [
    "kind", "objective", "process", "D", "N", "n_t", "n_ep", "seed",
    "final_loss", "kl_upper", "kl_stderr", "n_excluded", "train_s", "eval_s",
]

# Benchmark mixtures are shared across all cells of a sweep so KL values
# are comparable; only the RNG seeds of training/eval vary.
MIXTURE_SEED = 2024


@dataclass(frozen=True)
class BenchConfig:
    n_test: int = 10_000
    n_seeds: int = 8
    timing_samples: int = 100
    kl_n_throws: int = 1024
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_test < 1 or self.n_seeds < 1:
            raise InvalidArgumentError("n_test and n_seeds must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_test": self.n_test,
            "n_seeds": self.n_seeds,
            "timing_samples": self.timing_samples,
            "kl_n_throws": self.kl_n_throws,
            "master_seed": self.master_seed,
            "workers": self.workers,
        }


@dataclass(frozen=True)
class KlResult:
    kl_upper: float
    std_error: float
    n_points: int
    n_excluded: int
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.std_error < 0:
            raise InvalidArgumentError("std_error must be >= 0")


EstimateFn = Callable[[np.ndarray, int], LogDensityEstimate]


def kl_by_mc(
    mix: GaussianMixture,
    estimate_fn: EstimateFn,
    n_test: int,
    seed: int,
    config_echo: dict | None = None,
) -> KlResult:
    """KL upper bound by Monte Carlo over fresh mixture draws.

    estimate_fn(x, point_seed) must return a LogDensityEstimate; degenerate
    estimates are excluded from the mean but counted, never silent.
    """
    if n_test < 1:
        raise InvalidArgumentError("n_test must be >= 1")
    points = gmm_sample(mix, n_test, seed=derive_key(seed, "kl-points") % 2**63)
    true_logp = gmm_log_density(mix, points)
    gaps = []
    n_excluded = 0
    for i in range(n_test):
        try:
            est = estimate_fn(points[i], derive_key(seed, "kl-est", i) % 2**63)
        except DegenerateEstimateError:
            n_excluded += 1
            continue
        gaps.append(true_logp[i] - est.value)
    if not gaps:
        raise DegenerateEstimateError(n_excluded, n_test)
    gaps = np.asarray(gaps)
    se = float(np.std(gaps, ddof=1) / np.sqrt(gaps.size)) if gaps.size > 1 else 0.0
    return KlResult(
        kl_upper=float(np.mean(gaps)),
        std_error=se,
        n_points=int(gaps.size),
        n_excluded=n_excluded,
        config=dict(config_echo or {}),
    )


def pathint_estimator(
    objective: str,
    net,
    proc: DiffusionProcess,
    n_throws: int,
    s_min: float = 1e-3,
    chunk: int = 16384,
) -> EstimateFn:
    """Per-point estimator closure for kl_by_mc / timing."""

    def fn(x: np.ndarray, seed: int) -> LogDensityEstimate:
        cfg = EstimateConfig(n_throws=n_throws, seed=seed, s_min=s_min, chunk=chunk)
        return pathint.log_density(objective, net, proc, x, cfg)

    return fn


def pfode_estimator(
    objective: str, net, proc: DiffusionProcess, base_cfg: OdeConfig
) -> EstimateFn:
    def fn(x: np.ndarray, seed: int) -> LogDensityEstimate:
        cfg = OdeConfig(**{**base_cfg.to_dict(), "seed": seed})
        r = pfode.log_density_ode(objective, net, proc, x, cfg)
        return LogDensityEstimate(
            value=r.logp,
            std_error=float("nan"),
            n_throws=cfg.n_eps,
            estimator="ode",
            wall_time=r.wall_time,
        )

    return fn


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

_BASE_DEFAULTS = {
    "process": "vp",
    "objective": "sm",
    "dim": 2,
    "n_samples": 8192,
    "n_throws": 10,
    "n_epochs": 200,
    "batch_size": 512,
    "learning_rate": 1e-3,
    "s_min": 1e-3,
    "n_components": 6,
    "mixture_half_width": 2.5,
    "mixture_comp_std": 0.6,
    "mixture_center": 0.0,
}


def _cell_key(cell: dict, seed_index: int) -> tuple:
    return (
        f"{cell['process']}-{cell['objective']}",
        cell["objective"],
        cell["process"],
        int(cell["dim"]),
        int(cell["n_samples"]),
        int(cell["n_throws"]),
        int(cell["n_epochs"]),
        seed_index,
    )


def _make_process(kind: str) -> DiffusionProcess:
    return DiffusionProcess(kind=kind)


def run_cell(cell: dict, seed_index: int, bench: BenchConfig) -> dict:
    """Train one model and evaluate its KL; returns one results row."""
    key = _cell_key(cell, seed_index)
    proc = _make_process(cell["process"])
    mix = benchmark_mixture(
        int(cell["dim"]),
        n_components=int(cell["n_components"]),
        seed=MIXTURE_SEED,
        half_width=float(cell["mixture_half_width"]),
        comp_std=float(cell["mixture_comp_std"]),
        center=float(cell["mixture_center"]),
    )
    label = "|".join(str(k) for k in key)
    data = gmm_sample(
        mix, int(cell["n_samples"]),
        seed=derive_key(bench.master_seed, "data", label) % 2**63,
    )
    net_kw = {}
    if "n_features" in cell:
        net_kw["n_features"] = int(cell["n_features"])
    if "hidden" in cell:
        net_kw["hidden"] = tuple(int(h) for h in cell["hidden"])
    if "x_bandwidth" in cell:
        net_kw["x_bandwidth"] = float(cell["x_bandwidth"])
    cfg = TrainConfig(
        n_samples=int(cell["n_samples"]),
        n_throws=int(cell["n_throws"]),
        n_epochs=int(cell["n_epochs"]),
        process=proc,
        objective=cell["objective"],
        batch_size=int(cell["batch_size"]),
        learning_rate=float(cell["learning_rate"]),
        seed=derive_key(bench.master_seed, "train", label) % 2**63,
        s_min=float(cell["s_min"]),
        **net_kw,
    )
    t0 = time.perf_counter()
    params, history = train(cfg, data)
    train_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    est = pathint_estimator(
        cell["objective"], params, proc, bench.kl_n_throws, s_min=float(cell["s_min"])
    )
    klr = kl_by_mc(
        mix, est, bench.n_test,
        seed=derive_key(bench.master_seed, "kl", label) % 2**63,
    )
    eval_s = time.perf_counter() - t0
    return {
        "kind": key[0], "objective": key[1], "process": key[2], "D": key[3],
        "N": key[4], "n_t": key[5], "n_ep": key[6], "seed": seed_index,
        "final_loss": history[-1].mean_loss, "kl_upper": klr.kl_upper,
        "kl_stderr": klr.std_error, "n_excluded": klr.n_excluded,
        "train_s": train_s, "eval_s": eval_s,
    }


def _run_cell_safe(args: tuple) -> dict:
    cell, seed_index, bench = args
    try:
        return run_cell(cell, seed_index, bench)
    except Exception as exc:  # recorded in the row; the sweep continues
        log.warning("cell %s seed %d failed: %s", cell, seed_index, exc)
        key = _cell_key(cell, seed_index)
        return {
            "kind": key[0], "objective": key[1], "process": key[2], "D": key[3],
            "N": key[4], "n_t": key[5], "n_ep": key[6], "seed": seed_index,
            "final_loss": float("nan"), "kl_upper": float("nan"),
            "kl_stderr": float("nan"), "n_excluded": -1,
            "train_s": float("nan"), "eval_s": float("nan"),
        }


def _worker_init():
    from . import _tuning

    _tuning.apply()
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass


def expand_grid(base: dict, grid: dict[str, Sequence]) -> list[dict]:
    """Cartesian product of grid values over the base cell."""
    if not grid:
        raise InvalidArgumentError("sweep grid must not be empty")
    merged = {**_BASE_DEFAULTS, **base}
    keys = sorted(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cell = dict(merged)
        cell.update(dict(zip(keys, combo)))
        cells.append(cell)
    return cells


def sweep(
    base: dict,
    grid: dict[str, Sequence],
    out_path: str | Path,
    bench: BenchConfig | None = None,
) -> list[dict]:
    """Train and evaluate one model per grid cell per seed; one CSV row per
    (cell, seed). Rows already present in out_path are not recomputed."""
    bench = bench or BenchConfig()
    out_path = Path(out_path)
    cells = expand_grid(base, grid)
    done: dict[tuple, dict] = {}
    if out_path.exists():
        for row in read_results_csv(out_path):
            done[_row_key(row)] = row
    tasks = []
    for cell in cells:
        for seed_index in range(bench.n_seeds):
            if _cell_key(cell, seed_index) not in done:
                tasks.append((cell, seed_index, bench))
    log.info("sweep: %d cells x %d seeds, %d to run, %d cached",
             len(cells), bench.n_seeds, len(tasks), len(done))
    new_rows: list[dict] = []
    if tasks:
        if bench.workers > 1:
            with ProcessPoolExecutor(
                max_workers=bench.workers, initializer=_worker_init
            ) as pool:
                for row in pool.map(_run_cell_safe, tasks):
                    new_rows.append(row)
                    _append_partial(out_path, done, new_rows)
        else:
            for t in tasks:
                new_rows.append(_run_cell_safe(t))
                _append_partial(out_path, done, new_rows)
    rows = sorted(
        [*done.values(), *new_rows],
        key=lambda r: _row_key(r),
    )
    write_results_csv(out_path, rows)
    return rows


def _append_partial(out_path: Path, done: dict, new_rows: list[dict]) -> None:
    # checkpoint after every completed run so interrupts lose nothing
    write_results_csv(out_path, [*done.values(), *new_rows])


def _row_key(row: dict) -> tuple:
    return (
        str(row["kind"]), str(row["objective"]), str(row["process"]),
        int(row["D"]), int(row["N"]), int(row["n_t"]), int(row["n_ep"]),
        int(row["seed"]),
    )


# ---------------------------------------------------------------------------
# Results CSV
# ---------------------------------------------------------------------------

def write_results_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS)
        w.writeheader()
        for row in rows:
            out = dict(row)
            for k in ("final_loss", "kl_upper", "kl_stderr", "train_s", "eval_s"):
                out[k] = f"{float(row[k]):.10g}"
            w.writerow(out)


def read_results_csv(path: str | Path) -> list[dict]:
    """Parse a results CSV, reporting the offending line on errors."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty results file", f"{path}:1") from None
        if header != RESULTS_COLUMNS:
            raise SchemaError(
                f"header {header!r} does not match {RESULTS_COLUMNS!r}", f"{path}:1"
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(RESULTS_COLUMNS):
                raise SchemaError(
                    f"expected {len(RESULTS_COLUMNS)} fields, got {len(rec)}",
                    f"{path}:{lineno}",
                )
            row = dict(zip(RESULTS_COLUMNS, rec))
            try:
                for k in ("D", "N", "n_t", "n_ep", "seed", "n_excluded"):
                    row[k] = int(row[k])
                for k in ("final_loss", "kl_upper", "kl_stderr", "train_s", "eval_s"):
                    row[k] = float(row[k])
            except ValueError as exc:
                raise SchemaError(str(exc), f"{path}:{lineno}") from exc
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Timing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingRow:
    method: str
    index: int
    value: float
    wall_time: float
    n_steps: int = 0


def timing_compare(
    net,
    proc: DiffusionProcess,
    objective: str,
    methods: Sequence[str],
    points: np.ndarray,
    est_cfg: EstimateConfig,
    ode_cfg: OdeConfig,
) -> list[TimingRow]:
    """Per-sample wall time of each estimator over shared points, one sample
    at a time. One warm-up evaluation per method is excluded. BLAS threading
    is pinned to a single thread for the duration so methods compete fairly.
    """
    if not methods:
        raise InvalidArgumentError("at least one method required")
    points = np.asarray(points, dtype=float)
    rows: list[TimingRow] = []
    try:
        import threadpoolctl

        limit = threadpoolctl.threadpool_limits(1)
    except ImportError:
        limit = None
    try:
        for method in methods:
            _timed_eval(method, net, proc, objective, points[0], 0, est_cfg, ode_cfg)
            for i in range(points.shape[0]):
                rows.append(
                    _timed_eval(
                        method, net, proc, objective, points[i], i, est_cfg, ode_cfg
                    )
                )
    finally:
        if limit is not None:
            limit.unregister()
    return rows


def _timed_eval(method, net, proc, objective, x, i, est_cfg, ode_cfg) -> TimingRow:
    seed = derive_key(est_cfg.seed, "timing", method, i) % 2**63
    if method == "path":
        cfg = EstimateConfig(**{**est_cfg.to_dict(), "seed": seed})
        t0 = time.perf_counter()
        est = pathint.log_density(objective, net, proc, x, cfg)
        return TimingRow("path", i, est.value, time.perf_counter() - t0)
    if method in ("ode", "ode-delayed"):
        mode = "per-step" if method == "ode" else "delayed"
        cfg = OdeConfig(**{**ode_cfg.to_dict(), "seed": seed, "trace_mode": mode})
        t0 = time.perf_counter()
        r = pfode.log_density_ode(objective, net, proc, x, cfg)
        return TimingRow(method, i, r.logp, time.perf_counter() - t0, r.n_steps)
    raise InvalidArgumentError(f"unknown method {method!r}")


def timing_summary(rows: Sequence[TimingRow]) -> dict[str, dict]:
    """Per-method mean/std/min/max/cv of per-sample wall time."""
    out: dict[str, dict] = {}
    for method in sorted({r.method for r in rows}):
        ts = np.array([r.wall_time for r in rows if r.method == method])
        mean = float(ts.mean())
        std = float(ts.std(ddof=1)) if ts.size > 1 else 0.0
        out[method] = {
            "n": int(ts.size),
            "mean_s": mean,
            "std_s": std,
            "min_s": float(ts.min()),
            "max_s": float(ts.max()),
            "cv": std / mean if mean > 0 else 0.0,
        }
    return out


TIMING_COLUMNS = ["method", "index", "value", "wall_time_s", "n_steps"]


def write_timing_csv(path: str | Path, rows: Sequence[TimingRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_COLUMNS)
        for r in rows:
            w.writerow([r.method, r.index, f"{r.value:.10g}",
                        f"{r.wall_time:.6f}", r.n_steps])


def read_timing_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty timing file", f"{path}:1") from None
        if header != TIMING_COLUMNS:
            raise SchemaError(
                f"header {header!r} does not match {TIMING_COLUMNS!r}", f"{path}:1"
            )
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(TIMING_COLUMNS):
                raise SchemaError(
                    f"expected {len(TIMING_COLUMNS)} fields, got {len(rec)}",
                    f"{path}:{lineno}",
                )
            row = dict(zip(TIMING_COLUMNS, rec))
            try:
                row["index"] = int(row["index"])
                row["n_steps"] = int(row["n_steps"])
                row["value"] = float(row["value"])
                row["wall_time_s"] = float(row["wall_time_s"])
            except ValueError as exc:
                raise SchemaError(str(exc), f"{path}:{lineno}") from exc
            rows.append(row)
    return rows


def render_plots(results_csv: str | Path, spec: dict) -> list[Path]:
    """Render the plots described by spec from a results or timing CSV.

    spec: {"kind": "kl", "x": <swept column>} or {"kind": "timing"},
    optionally {"out": path}. Output paths default to the results filename
    with a plot suffix. Identical inputs give byte-identical SVG.
    """
    from . import svgplot

    results_csv = Path(results_csv)
    kind = spec.get("kind", "kl")
    if kind == "kl":
        rows = read_results_csv(results_csv)
        x_key = spec.get("x", "N")
        out = Path(
            spec.get("out")
            or results_csv.parent / f"{results_csv.stem}_kl_vs_{x_key}.svg"
        )
        svgplot.render_kl_plot(rows, x_key, out, title=spec.get("title", ""))
        return [out]
    if kind == "timing":
        rows = read_timing_csv(results_csv)
        out = Path(spec.get("out") or results_csv.parent / f"{results_csv.stem}_timing.svg")
        svgplot.render_timing_plot(rows, out)
        return [out]
    raise SchemaError(f"unknown plot kind {kind!r}", "spec.kind")
