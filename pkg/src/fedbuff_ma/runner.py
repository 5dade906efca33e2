"""Run, sweep, diagnose and report: everything that touches the filesystem.

These functions back both the CLI and the HTTP service. Every output is
plain JSON lines or CSV so it can be consumed without this package.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .config import MAX_SWEEP_RUNS, DelayConfig, ExperimentSpec, SimConfig
from .engine import RunResult, build_task, run, simulate_staleness, substream
from .errors import FedBuffMAError, InvalidInput
from .linalg import frobenius_sq, numerical_rank, singular_values
from .momentum import MomentumMatrix, compute_diagnostics, solve_all, solve_all_lightweight
from .staleness import read_triplets, write_triplets
from .tasks import (
    BoundCheck,
    async_bound,
    generalized_ma_bound,
    ideal_trajectory,
    ma_bound,
    measure_bound_inputs,
    sync_bound,
    theorem_gap_check,
    trajectory_gap,
)

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
SWEEP_FILE = "sweep.csv"
DIAGNOSTICS_FILE = "diagnostics.jsonl"
DELAY_TABLE_FILE = "delay_table.jsonl"


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps_line(record: dict) -> str:
    """One compact JSON object, no embedded newlines."""
    return json.dumps(_clean(record), separators=(",", ":"), allow_nan=False)


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_to_dir(config: SimConfig, out_dir: str | Path, *, write_matrices: bool = False) -> dict:
    """Run one config and write its artifacts; returns the summary.

    Writes ``metrics.jsonl``, ``summary.json`` (summary plus the config and
    its content hash) and, when asked, ``W.csv`` and ``A.csv`` as 1-based
    triplets.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run(config)
    write_jsonl(out / METRICS_FILE, result.metrics)
    summary = dict(result.summary)
    summary["config_hash"] = config.content_hash()
    summary["config"] = config.model_dump(mode="json")
    if write_matrices:
        write_triplets(result.staleness.dense(), out / "W.csv")
        if result.coefficients is not None:
            write_triplets(result.coefficients, out / "A.csv")
    with open(out / SUMMARY_FILE, "w", encoding="utf-8") as fh:
        json.dump(_clean(summary), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return summary


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    axes: dict[str, Any]
    config: SimConfig
    run_dir: Path
    summary: dict | None = None
    error: str | None = None
    resumed: bool = False


def _completed_summary(run_dir: Path, config_hash: str) -> dict | None:
    path = run_dir / SUMMARY_FILE
    if not path.is_file() or not (run_dir / METRICS_FILE).is_file():
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            summary = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None
    return summary if summary.get("config_hash") == config_hash else None


def _sweep_worker(args: tuple[str, str, bool]) -> tuple[dict | None, str | None]:
    doc, run_dir, write_matrices = args
    try:
        config = SimConfig.model_validate_json(doc)
        return run_to_dir(config, run_dir, write_matrices=write_matrices), None
    except (FedBuffMAError, ValueError, ArithmeticError, OSError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def check_sweep_size(spec: ExperimentSpec, force: bool = False) -> int:
    n = spec.size()
    if n > MAX_SWEEP_RUNS and not force:
        raise InvalidInput(f"sweep expands to {n} runs (limit {MAX_SWEEP_RUNS}); pass --force-large-sweep to run it anyway")
    return n


def sweep(spec: ExperimentSpec, out_dir: str | Path | None = None, *, jobs: int | None = None, force: bool = False) -> list[SweepRow]:
    """Run every point of the sweep grid, skipping runs already on disk.

    Each run lives in ``runs/<content hash>``; a run whose summary carries
    the same hash is reused, which makes an interrupted sweep resumable.
    Failures are recorded on their row and do not stop the sweep. Writes
    ``sweep.csv`` with one row per grid point.
    """
    n = check_sweep_size(spec, force)
    root = Path(out_dir or spec.out_dir or "sweep-out")
    root.mkdir(parents=True, exist_ok=True)
    jobs = jobs or spec.jobs
    log.info("sweep: %d runs, %d workers, output %s", n, jobs, root)

    rows = []
    for axes, config in spec.expand():
        run_dir = root / "runs" / config.content_hash()
        row = SweepRow(axes, config, run_dir)
        done = _completed_summary(run_dir, config.content_hash())
        if done is not None:
            row.summary, row.resumed = done, True
        rows.append(row)

    todo = [r for r in rows if r.summary is None]
    args = [(r.config.model_dump_json(), str(r.run_dir), spec.write_matrices) for r in todo]
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_worker, args))
    else:
        outcomes = [_sweep_worker(a) for a in args]
    for row, (summary, error) in zip(todo, outcomes):
        row.summary, row.error = summary, error
        if error:
            log.warning("run %s failed: %s", row.run_dir.name, error)

    write_sweep_csv(rows, root / SWEEP_FILE, spec)
    return rows


def iterations_to_reach(losses: list[float | None], target: float) -> int | None:
    """First 1-based iteration whose loss is at or below ``target``."""
    for i, value in enumerate(losses, start=1):
        if value is not None and value <= target:
            return i
    return None


def speedup(baseline: list[float | None], method: list[float | None]) -> tuple[float | None, int | None, int | None]:
    """Iteration speedup of ``method`` over ``baseline``.

    The target is the baseline's best loss; the baseline's iteration count
    is where it first attains it. Returns ``(ratio, baseline_iters,
    method_iters)``; the ratio is 0 when the method never reaches the target.
    """
    finite = [v for v in baseline if v is not None]
    if not finite:
        return None, None, None
    target = min(finite)
    base_iters = iterations_to_reach(baseline, target)
    method_iters = iterations_to_reach(method, target)
    if method_iters is None:
        return 0.0, base_iters, None
    return base_iters / method_iters, base_iters, method_iters


def _loss_series(run_dir: Path, metric: str) -> list[float | None]:
    return [rec.get(metric) for rec in read_jsonl(run_dir / METRICS_FILE)]


def write_sweep_csv(rows: list[SweepRow], path: Path, spec: ExperimentSpec) -> None:
    axis_names = list(spec.axes)
    metric = spec.speedup_metric
    # Baseline lookup: same axes except the method.
    baselines: dict[tuple, SweepRow] = {}
    for row in rows:
        if row.config.method == spec.baseline_method and row.summary is not None:
            key = tuple((k, json.dumps(v)) for k, v in row.axes.items() if k != "method")
            baselines[key] = row

    fixed = [
        "config_hash",
        "method",
        "seed",
        "status",
        "iterations",
        "final_loss",
        "final_ema_loss",
        "best_loss",
        "best_iteration",
        "iterations_to_threshold",
        "baseline_iterations",
        "method_iterations",
        "speedup",
        "error",
    ]
    fields = [a for a in axis_names if a not in fixed] + fixed
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            out = {k: (json.dumps(v) if isinstance(v, (dict, list)) else v) for k, v in row.axes.items() if k not in fixed}
            out.update(config_hash=row.config.content_hash(), method=row.config.method, seed=row.config.seed)
            s = row.summary
            if s is None:
                out.update(status="failed", error=row.error)
                writer.writerow(out)
                continue
            out["status"] = "diverged" if s.get("diverged") else "ok"
            for key in ("iterations", "final_loss", "final_ema_loss", "best_loss", "best_iteration", "iterations_to_threshold"):
                out[key] = s.get(key)
            key = tuple((k, json.dumps(v)) for k, v in row.axes.items() if k != "method")
            base = baselines.get(key)
            if base is not None:
                ratio, b_it, m_it = speedup(_loss_series(base.run_dir, metric), _loss_series(row.run_dir, metric))
                out.update(speedup=ratio, baseline_iterations=b_it, method_iterations=m_it)
            writer.writerow(out)


# ----------------------------------------------------------- diagnostics


def diagnose_matrix(w: np.ndarray, beta: float, cohort: int, *, with_projection: bool = True) -> tuple[list[dict], dict]:
    """Per-iteration diagnostics for a given W; returns ``(rows, summary)``.

    Solves full and light-weight MA from scratch, so no training is needed.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise InvalidInput(f"W must be square, got shape {w.shape}")
    n = w.shape[0]
    m = MomentumMatrix(beta, n).dense()
    a = solve_all(w, m)
    a_light = solve_all_lightweight(w, m)
    diag = compute_diagnostics(w, m, a, cohort, a_light=a_light, with_projection=with_projection)
    summary = {
        "horizon": n,
        "beta": beta,
        "cohort": cohort,
        "full_cumulative_error": float(diag.cumulative[-1]) if n else 0.0,
        "light_cumulative_error": float(diag.light_cumulative[-1]) if n else 0.0,
        "final_nullity": int(diag.nullity[-1]) if n and with_projection else None,
        "max_nullity": int(diag.nullity.max()) if n and with_projection else None,
        "a_frob_sq": float(diag.a_frob_sq[-1]) if n else 0.0,
        "max_log_ratio_from_10": _max_finite(diag.log_ratio[9:]),
    }
    return diag.records(), summary


def _max_finite(values: np.ndarray) -> float | None:
    finite = values[np.isfinite(values)]
    return float(finite.max()) if finite.size else None


def diagnose_config(config: SimConfig, *, with_projection: bool = True) -> tuple[list[dict], dict]:
    w = simulate_staleness(config).dense()
    rows, summary = diagnose_matrix(w, config.beta, config.cohort, with_projection=with_projection)
    summary.update(staleness_exponent=config.staleness_exponent, delay=config.delay.model_dump(), seed=config.seed)
    return rows, summary


def diagnose_to_dir(
    out_dir: str | Path,
    *,
    config: SimConfig | None = None,
    w_path: str | Path | None = None,
    beta: float = 0.9,
    cohort: int = 1,
    with_projection: bool = True,
) -> dict:
    """Write ``diagnostics.jsonl`` (one line per iteration) and a summary."""
    if (config is None) == (w_path is None):
        raise InvalidInput("give exactly one of a config or a W triplet file")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config is not None:
        rows, summary = diagnose_config(config, with_projection=with_projection)
    else:
        rows, summary = diagnose_matrix(read_triplets(w_path), beta, cohort, with_projection=with_projection)
        summary["source"] = str(w_path)
    write_jsonl(out / DIAGNOSTICS_FILE, rows)
    with open(out / "diagnostics_summary.json", "w", encoding="utf-8") as fh:
        json.dump(_clean(summary), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return summary


DELAY_KINDS = ("half-normal", "uniform", "exponential")
DEFAULT_P_GRID = (0.5, 1.0, 1.5, 2.0)


def delay_table(
    base: SimConfig,
    delays: dict[str, DelayConfig] | None = None,
    p_grid: Iterable[float] = DEFAULT_P_GRID,
) -> list[dict]:
    """Cumulative LS error of full and light-weight MA per delay distribution.

    For each distribution, W is simulated at every ``p`` in ``p_grid`` and
    the ``p`` with the smallest full-MA error is kept, so ``p`` is tuned per
    run. Errors are reported as fractions, not percentages.
    """
    delays = delays or {k: DelayConfig(kind=k) for k in DELAY_KINDS}
    table = []
    for name, delay in delays.items():
        best = None
        for p in p_grid:
            config = base.model_copy(update={"delay": delay, "staleness_exponent": float(p)})
            _, summary = diagnose_config(config, with_projection=False)
            cand = {
                "delay": name,
                "scale": delay.scale,
                "cutoff": delay.cutoff,
                "p": float(p),
                "full_error": summary["full_cumulative_error"],
                "light_error": summary["light_cumulative_error"],
                "a_frob_sq": summary["a_frob_sq"],
            }
            if best is None or cand["full_error"] < best["full_error"]:
                best = cand
        table.append(best)
    return table


# ---------------------------------------------------------------- bounds


def bound_checks(config: SimConfig, *, n_subsets: int = 1000, n_iterations: int = 10) -> tuple[list[BoundCheck], RunResult]:
    """Compare one run against the error bound that applies to its method.

    The run is replayed with its model trace retained, the ideal
    full-participation trajectory is rebuilt from the same models, and S,
    G and rho-hat are measured on that trace. Sync runs get the synchronous
    bound, ma-full the approximation bound (the rank-general form when W is
    rank deficient somewhere), every other method the asynchronous one.
    """
    config = config.model_copy(update={"retain_history": True})
    res = run(config)
    if res.diverged:
        raise FedBuffMAError(f"run diverged after {len(res.metrics)} iterations; no bound applies")
    task = build_task(config)
    horizon = config.horizon
    star = ideal_trajectory(np.zeros(task.dim), res.thetas, task, config.local_lr, config.local_steps, config.beta, config.server_lr)
    lhs = trajectory_gap(star, res.theta, horizon)
    a_frob = frobenius_sq(res.coefficients) if config.method == "ma-full" else None
    inputs = measure_bound_inputs(
        res.thetas, task, config.local_lr, config.local_steps, config.K, config.cohort, config.tau_max,
        config.server_lr, substream(config.seed, "bounds"), n_subsets=n_subsets, n_iterations=n_iterations, a_frob_sq=a_frob,
    )
    if config.method == "sync":
        checks = [theorem_gap_check("sync", lhs, sync_bound(inputs), estimated=False)]
    elif config.method == "ma-full":
        w = res.staleness.dense()
        if numerical_rank(singular_values(w), w.shape) == horizon:
            checks = [theorem_gap_check("ma-full-rank", lhs, ma_bound(inputs))]
        else:
            m = MomentumMatrix(config.beta, horizon).dense()
            # For the minimum-norm solution the relative LS residual is
            # exactly the share of M_t outside the row space of W.
            diag = compute_diagnostics(w, m, res.coefficients, config.cohort, with_projection=False)
            oma = np.clip(diag.residual, 0.0, 1.0)
            checks = [theorem_gap_check("ma-general", lhs, generalized_ma_bound(inputs, oma))]
    else:
        checks = [theorem_gap_check("async", lhs, async_bound(inputs))]
    return checks, res


# ---------------------------------------------------------------- report


def _median(values: list[float]) -> float | None:
    return statistics.median(values) if values else None


def _num(value: str | None) -> float | None:
    if value in (None, ""):
        return None
    try:
        return float(value)
    except ValueError:
        return None


def report(path: str | Path) -> dict:
    """Aggregate a sweep directory (or a single run directory).

    For sweeps, rows are grouped by every axis except ``seed`` and each group
    gets the median final loss, final EMA loss, best loss and speedup plus
    counts of failed and diverged runs. Writes ``report.json`` next to the
    input and returns the same document.
    """
    root = Path(path)
    if (root / SWEEP_FILE).is_file():
        with open(root / SWEEP_FILE, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        fixed = {"config_hash", "method", "seed", "status", "iterations", "final_loss", "final_ema_loss", "best_loss",
                 "best_iteration", "iterations_to_threshold", "baseline_iterations", "method_iterations", "speedup", "error"}
        axes = [k for k in (rows[0].keys() if rows else []) if k not in fixed]
        groups: dict[tuple, list[dict]] = {}
        for row in rows:
            key = tuple((a, row[a]) for a in axes if a != "seed") + (("method", row["method"]),)
            groups.setdefault(key, []).append(row)
        out_groups = []
        for key, members in groups.items():
            ok = [m for m in members if m["status"] == "ok"]
            out_groups.append(
                {
                    **dict(key),
                    "runs": len(members),
                    "failed": sum(m["status"] == "failed" for m in members),
                    "diverged": sum(m["status"] == "diverged" for m in members),
                    "median_final_loss": _median([v for m in ok if (v := _num(m["final_loss"])) is not None]),
                    "median_final_ema_loss": _median([v for m in ok if (v := _num(m["final_ema_loss"])) is not None]),
                    "median_best_loss": _median([v for m in ok if (v := _num(m["best_loss"])) is not None]),
                    "median_speedup": _median([v for m in ok if (v := _num(m["speedup"])) is not None]),
                }
            )
        doc = {"kind": "sweep", "source": str(root), "groups": out_groups}
    elif (root / SUMMARY_FILE).is_file():
        with open(root / SUMMARY_FILE, encoding="utf-8") as fh:
            summary = json.load(fh)
        doc = {"kind": "run", "source": str(root), "summary": {k: v for k, v in summary.items() if k != "config"}}
    else:
        raise InvalidInput(f"{root} holds neither {SWEEP_FILE} nor {SUMMARY_FILE}")
    with open(root / "report.json", "w", encoding="utf-8") as fh:
        json.dump(_clean(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return doc


def format_report(doc: dict) -> str:
    """Plain-text table for terminals."""
    if doc["kind"] == "run":
        return "\n".join(f"{k}: {v}" for k, v in sorted(doc["summary"].items()))
    lines = []
    for g in doc["groups"]:
        head = ", ".join(f"{k}={v}" for k, v in g.items() if not k.startswith("median") and k not in ("runs", "failed", "diverged"))
        stats = ", ".join(f"{k}={v:.4g}" for k, v in g.items() if k.startswith("median") and v is not None)
        lines.append(f"{head} | runs={g['runs']} failed={g['failed']} diverged={g['diverged']} | {stats}")
    return "\n".join(lines)
