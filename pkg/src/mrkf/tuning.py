"""Evaluation metrics and the latin-hypercube grid-search tuner.

Three ranking criteria are computed from one run log: L1 norm of the
state NRMSE, L1 norm of the output NRMSE (both against ground truth), and
a weighted consistency cost combining the measured-output error, the
normalized covariance trace, and mean / variance / tail-fraction
consistency of the normalized innovation squared. Only the second half of
the horizon enters the metrics, separating steady filtering quality from
the initial transient.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2, qmc

from . import ekf, multirate
from .events import OfflineReturn, OnlineMeasurement, ONLINE_SIGNALS, grid_index
from .runlog import RunLog, STATUS_OK

#: weights of the five consistency-cost summands
BOULKROUNE_WEIGHTS = np.array([1.0, 1e-3, 1.0, 1.0, 5e-2])
BOULKROUNE_ALPHA = 0.05

LHS_BOUNDS = (1e-2, 1e2)
LHS_DIMS = 15  # 14 process-noise diagonals + measurement amplification


def nrmse(truth: np.ndarray, estimate: np.ndarray) -> float:
    """Root-mean-square error normalized by the truth range."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape or truth.size < 2:
        raise ValueError("series must have equal length >= 2")
    span = truth.max() - truth.min()
    if span <= 0.0:
        raise ValueError("degenerate series: zero range")
    return float(np.sqrt(np.mean((estimate - truth) ** 2)) / span)


def nis(innovation: np.ndarray, S: np.ndarray) -> float:
    """Normalized innovation squared; S must be symmetric positive definite."""
    innovation = np.atleast_1d(np.asarray(innovation, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    chol = cho_factor(S)
    return float(innovation @ cho_solve(chol, innovation))


def chi2_interval(q: float, alpha: float = BOULKROUNE_ALPHA):
    """Two-sided chi-square confidence bounds with ``q`` degrees of freedom."""
    return chi2.ppf(alpha / 2.0, q), chi2.ppf(1.0 - alpha / 2.0, q)


def nis_consistency(nis_rows, alpha: float = BOULKROUNE_ALPHA):
    """Mean, variance and tail-fraction consistency of a NIS series.

    Rows are ``(q, value)`` with per-update degrees of freedom, so series
    with mixed update dimensions stay chi-square-consistent: each value is
    normalized by its own dof (mean term), its squared deviation by 2q
    (variance term), and counted against its own two-sided interval.
    """
    rows = [(float(q), float(e)) for q, e in nis_rows]
    if not rows:
        raise ValueError("empty NIS series")
    qs = np.array([q for q, _ in rows])
    es = np.array([e for _, e in rows])
    mean_term = abs(np.mean(es / qs) - 1.0)
    var_term = abs(np.mean((es - qs) ** 2 / (2.0 * qs)) - 1.0)
    lo = chi2.ppf(alpha / 2.0, qs)
    hi = chi2.ppf(1.0 - alpha / 2.0, qs)
    n_out = int(np.sum((es < lo) | (es > hi)))
    tail_term = abs(n_out / (alpha * len(rows)) - 1.0)
    return mean_term, var_term, tail_term


def _measured_series(events, eval_start: float, dt_days: float):
    """Measured output values per signal, keyed by the grid step they
    pertain to (offline values at their sample step)."""
    sample_step = {}
    for ev in events:
        if hasattr(ev, "sample_id") and not isinstance(ev, OfflineReturn):
            sample_step[ev.sample_id] = grid_index(ev.t, dt_days)
    series = {j: [] for j in range(6)}
    for ev in events:
        if isinstance(ev, OnlineMeasurement):
            if ev.t >= eval_start:
                k = grid_index(ev.t, dt_days)
                for j, v in zip(ONLINE_SIGNALS, ev.values):
                    series[j].append((k, v))
        elif isinstance(ev, OfflineReturn):
            k = sample_step.get(ev.sample_id)
            if k is None:
                continue
            t_s = k * dt_days
            if t_s >= eval_start:
                for j, v in zip(ev.signals, ev.values):
                    series[j].append((k, v))
    return series


def boulkroune_cost(log: RunLog, events, eval_start: float,
                    dt_days: float = 1.0 / 24.0,
                    weights: np.ndarray = BOULKROUNE_WEIGHTS,
                    alpha: float = BOULKROUNE_ALPHA):
    """Weighted consistency cost; returns (total, five summands).

    Summand 1 compares estimates against *measured* outputs only, so the
    cost is computable without ground truth.
    """
    weights = np.asarray(weights, dtype=float)
    if np.any(weights <= 0.0):
        raise ValueError("weights must be positive")
    t = log.t_array()
    yhat = log.output_array()
    step_of = {grid_index(ti, dt_days): i for i, ti in enumerate(t)}

    series = _measured_series(events, eval_start, dt_days)
    nrmse_y_meas = []
    for j in range(6):
        pts = [(step_of[k], v) for k, v in series[j] if k in step_of]
        if len(pts) < 2:
            continue
        meas = np.array([v for _, v in pts])
        est = np.array([yhat[i, j] for i, _ in pts])
        span = meas.max() - meas.min()
        if span <= 0.0:
            continue
        nrmse_y_meas.append(np.sqrt(np.mean((est - meas) ** 2)) / span)
    s1 = float(np.linalg.norm(nrmse_y_meas)) if nrmse_y_meas else np.nan

    window = t >= eval_start
    traces = np.asarray(log.trace_norm)[window]
    s2 = float(np.sqrt(np.mean(traces ** 2))) if traces.size else np.nan

    rows = [(q, e) for (tu, q, e) in log.updates if tu >= eval_start]
    s3, s4, s5 = nis_consistency(rows, alpha)
    summands = np.array([s1, s2, s3, s4, s5])
    return float(weights @ summands), summands


@dataclass
class RunMetrics:
    """Per-run evaluation over the second half of the horizon."""

    nrmse_x: np.ndarray = field(default_factory=lambda: np.full(14, np.nan))
    nrmse_x_l1: float = np.nan
    nrmse_y: np.ndarray = field(default_factory=lambda: np.full(6, np.nan))
    nrmse_y_l1: float = np.nan
    boulkroune: float = np.nan
    summands: np.ndarray = field(default_factory=lambda: np.full(5, np.nan))
    wall_time: float = 0.0
    status: str = STATUS_OK


def evaluate_run(log: RunLog, truth_t, truth_x, truth_y, events,
                 eval_start: float | None = None,
                 dt_days: float = 1.0 / 24.0) -> RunMetrics:
    """All three criteria from one run log."""
    m = RunMetrics(status=log.status, wall_time=log.wall_time)
    if log.status != STATUS_OK or len(log.t) < 2:
        return m
    if eval_start is None:
        eval_start = truth_t[-1] / 2.0
    t = log.t_array()
    if len(t) != len(truth_t) or abs(t[-1] - truth_t[-1]) > 1e-9:
        raise ValueError("run log grid does not match the truth grid")
    window = t >= eval_start
    X, Y = log.state_array(), log.output_array()
    m.nrmse_x = np.array([nrmse(truth_x[window, i], X[window, i])
                          for i in range(X.shape[1])])
    m.nrmse_x_l1 = float(np.sum(m.nrmse_x))
    m.nrmse_y = np.array([nrmse(truth_y[window, j], Y[window, j])
                          for j in range(Y.shape[1])])
    m.nrmse_y_l1 = float(np.sum(m.nrmse_y))
    m.boulkroune, m.summands = boulkroune_cost(log, events, eval_start, dt_days)
    return m


# ---------------------------------------------------------------------------
# latin hypercube tuning search
# ---------------------------------------------------------------------------

def lhs_sample(n_samples: int, n_dims: int = LHS_DIMS,
               bounds=LHS_BOUNDS, seed: int = 0) -> np.ndarray:
    """Log-uniform latin hypercube: one point per stratum per dimension."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sampler = qmc.LatinHypercube(d=n_dims, seed=seed)
    unit = sampler.random(n=n_samples)
    lo, hi = np.log10(bounds[0]), np.log10(bounds[1])
    return 10.0 ** (lo + unit * (hi - lo))


def _tuning_noise(sample: np.ndarray) -> ekf.NoiseConfig:
    base = ekf.NoiseConfig.default()
    return ekf.NoiseConfig(Q_diag=np.asarray(sample[:14], dtype=float),
                           k_R=float(sample[14]),
                           R_diag_base=base.R_diag_base)


def _eval_one(payload):
    (idx, sample, bundle, cutoff_secs, fusion, eval_start) = payload
    noise = _tuning_noise(sample)
    hooks = ekf.normalized_hooks(bundle.filter_model(), bundle.maps)
    opts = multirate.MultirateOptions(fusion=fusion,
                                      deadline_secs=cutoff_secs)
    log = multirate.run_multirate(hooks, bundle.maps, noise, bundle.schedule,
                                  bundle.events,
                                  bundle.x0_estimate_normalized(),
                                  bundle.config.days, opts)
    try:
        metrics = evaluate_run(log, bundle.truth_t, bundle.truth_x,
                               bundle.truth_y, bundle.events,
                               eval_start=eval_start,
                               dt_days=bundle.config.dt_days)
    except (ValueError, FloatingPointError):
        metrics = RunMetrics(status="diverged", wall_time=log.wall_time)
    return idx, metrics


def grid_search(bundle, tunings: np.ndarray, cutoff_secs: float = 30.0,
                jobs: int = 1, fusion: str = multirate.FUSION_EXACT,
                eval_start: float | None = None,
                progress=None) -> list:
    """Evaluate each tuning on the fixed scenario; failures are data.

    Returns one row per tuning (merged by index, not completion order):
    ``{"tuning_id", "Q_diag", "k_R", "metrics"}``.
    """
    payloads = [(i, tunings[i], bundle, cutoff_secs, fusion, eval_start)
                for i in range(len(tunings))]
    results = {}
    if jobs <= 1:
        for p in payloads:
            idx, metrics = _eval_one(p)
            results[idx] = metrics
            if progress:
                progress(idx, metrics)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for idx, metrics in pool.map(_eval_one, payloads):
                results[idx] = metrics
                if progress:
                    progress(idx, metrics)
    rows = []
    for i in range(len(tunings)):
        rows.append({"tuning_id": i, "Q_diag": np.asarray(tunings[i][:14]),
                     "k_R": float(tunings[i][14]), "metrics": results[i]})
    return rows


RANK_KEYS = {
    "nrmse_x": lambda m: m.nrmse_x_l1,
    "nrmse_y": lambda m: m.nrmse_y_l1,
    "boulkroune": lambda m: m.boulkroune,
}


def rank_rows(rows, criterion: str) -> list:
    """Successful runs sorted ascending by the criterion; failures excluded."""
    key = RANK_KEYS[criterion]
    ok = [r for r in rows if r["metrics"].status == STATUS_OK
          and np.isfinite(key(r["metrics"]))]
    return sorted(ok, key=lambda r: key(r["metrics"]))
