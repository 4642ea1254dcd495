"""Run logs shared by all filters: per-step state rows plus per-update rows."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .events import FLOAT_FMT

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_TIMEOUT = "timeout"


@dataclass
class RunLog:
    """Time series of a filter run in absolute units.

    ``states`` rows: posterior mean; ``cov_diag`` rows: posterior covariance
    diagonal (absolute units); ``outputs`` rows: predicted outputs at the
    posterior. ``updates`` rows: (t, q_av, nis). ``trace_norm`` carries the
    trace of the normalized online-block covariance for consistency metrics,
    ``aug_degree`` the number of pending samples after the step.
    """

    t: list = field(default_factory=list)
    states: list = field(default_factory=list)
    cov_diag: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    trace_norm: list = field(default_factory=list)
    aug_degree: list = field(default_factory=list)
    updates: list = field(default_factory=list)      # (t, q_av, nis)
    update_count: int = 0
    status: str = STATUS_OK
    failure: str = ""
    wall_time: float = 0.0

    def log_step(self, t, x_abs, p_diag_abs, y_abs, trace_norm, aug_degree):
        self.t.append(float(t))
        self.states.append(np.asarray(x_abs, dtype=float))
        self.cov_diag.append(np.asarray(p_diag_abs, dtype=float))
        self.outputs.append(np.asarray(y_abs, dtype=float))
        self.trace_norm.append(float(trace_norm))
        self.aug_degree.append(int(aug_degree))

    def log_update(self, t, q_av, nis):
        self.updates.append((float(t), int(q_av), float(nis)))
        self.update_count += 1

    # -- array views --------------------------------------------------------

    def t_array(self) -> np.ndarray:
        return np.asarray(self.t)

    def state_array(self) -> np.ndarray:
        return np.asarray(self.states)

    def output_array(self) -> np.ndarray:
        return np.asarray(self.outputs)

    def nis_array(self) -> np.ndarray:
        return np.array([(t, q, e) for t, q, e in self.updates])

    def max_aug_degree(self) -> int:
        return max(self.aug_degree) if self.aug_degree else 0

    # -- CSV ----------------------------------------------------------------

    def write_csv(self, path) -> None:
        nx = len(self.states[0]) if self.states else 0
        ny = len(self.outputs[0]) if self.outputs else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"]
                       + [f"xhat{i+1}" for i in range(nx)]
                       + [f"P{i+1}" for i in range(nx)]
                       + [f"yhat{i+1}" for i in range(ny)]
                       + ["trace_Pnorm", "aug_degree"])
            for k in range(len(self.t)):
                w.writerow([FLOAT_FMT % self.t[k]]
                           + [FLOAT_FMT % v for v in self.states[k]]
                           + [FLOAT_FMT % v for v in self.cov_diag[k]]
                           + [FLOAT_FMT % v for v in self.outputs[k]]
                           + [FLOAT_FMT % self.trace_norm[k],
                              str(self.aug_degree[k])])

    def write_updates_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "q_av", "nis"])
            for t, q, e in self.updates:
                w.writerow([FLOAT_FMT % t, str(q), FLOAT_FMT % e])


def read_runlog_csv(path) -> RunLog:
    log = RunLog()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        nx = sum(1 for h in header if h.startswith("xhat"))
        ny = sum(1 for h in header if h.startswith("yhat"))
        for row in reader:
            vals = list(map(float, row[:-1])) + [int(row[-1])]
            log.t.append(vals[0])
            log.states.append(np.array(vals[1:1 + nx]))
            log.cov_diag.append(np.array(vals[1 + nx:1 + 2 * nx]))
            log.outputs.append(np.array(vals[1 + 2 * nx:1 + 2 * nx + ny]))
            log.trace_norm.append(vals[1 + 2 * nx + ny])
            log.aug_degree.append(vals[-1])
    return log
