"""Stiff initial-value solving for the plant model and the filter time update.

Wraps an L-stable BDF integrator with analytic-Jacobian support, adds
nonnegativity clamping for mass concentrations, piecewise integration across
intervals of constant feed, and the joint propagation of state mean and
error covariance (optionally together with the state-transition matrix
needed for augmented cross-covariance blocks).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp as _scipy_solve_ivp


class DivergenceError(RuntimeError):
    """Integration or covariance blow-up: the run is treated as divergent."""


#: any diagonal of the (normalized) covariance above this flags divergence
COV_DIAG_CEILING = 1e8


@dataclass
class IvpProblem:
    """Initial-value problem with optional analytic Jacobian.

    ``rhs(t, x, u)`` and ``jacobian(t, x, u)`` receive the opaque input value
    ``u`` supplied per integration interval. ``nonnegative_mask`` marks
    components clamped to zero in the returned trajectory.
    """

    rhs: Callable
    t0: float
    t1: float
    x0: np.ndarray
    jacobian: Callable | None = None
    rtol: float = 1e-4
    atol: float = 1e-7
    nonnegative_mask: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.t1 < self.t0:
            raise ValueError("t1 must be >= t0")
        if self.rtol <= 0.0 or self.atol <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.nonnegative_mask is not None:
            self.nonnegative_mask = np.asarray(self.nonnegative_mask, dtype=bool)
            if self.nonnegative_mask.shape != self.x0.shape:
                raise ValueError("nonnegative_mask must match the state shape")


@dataclass
class InputSchedule:
    """Contiguous intervals of constant feed rate and influent composition."""

    intervals: list  # of (t_start, t_end, feed_rate, influent)

    def __post_init__(self):
        prev_end = None
        for t0, t1, feed, _ in self.intervals:
            if t1 <= t0:
                raise ValueError("empty or reversed schedule interval")
            if feed < 0.0:
                raise ValueError("feed rate must be nonnegative")
            if prev_end is not None and abs(t0 - prev_end) > 1e-12:
                raise ValueError("schedule intervals must be contiguous")
            prev_end = t1

    @property
    def t_start(self) -> float:
        return self.intervals[0][0]

    @property
    def t_end(self) -> float:
        return self.intervals[-1][1]

    def slice(self, t0: float, t1: float) -> list:
        """Sub-intervals covering [t0, t1], clipped at the boundaries."""
        if t0 < self.t_start - 1e-9 or t1 > self.t_end + 1e-9:
            raise ValueError(f"schedule does not cover [{t0}, {t1}]")
        out = []
        for a, b, feed, xi in self.intervals:
            lo, hi = max(a, t0), min(b, t1)
            if hi - lo > 1e-12:
                out.append((lo, hi, feed, xi))
        return out

    def mean_feed_rate(self) -> float:
        vol = sum((b - a) * feed for a, b, feed, _ in self.intervals)
        return vol / (self.t_end - self.t_start)


class Trajectory:
    """Dense-output solution over possibly several chained solver segments."""

    def __init__(self, segments, nonnegative_mask=None):
        # segments: list of (t0, t1, scipy OdeSolution)
        self._segments = segments
        self._mask = nonnegative_mask

    @property
    def t_start(self) -> float:
        return self._segments[0][0]

    @property
    def t_end(self) -> float:
        return self._segments[-1][1]

    @property
    def x_end(self) -> np.ndarray:
        return self(self.t_end)

    def __call__(self, t):
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(t_arr), len(self._segments[0][2](self.t_start))))
        for i, ti in enumerate(t_arr):
            if not (self.t_start - 1e-9 <= ti <= self.t_end + 1e-9):
                raise ValueError(f"query time {ti} outside [{self.t_start}, {self.t_end}]")
            t0, t1, seg = self._segments[-1]
            for a, b, sol in self._segments:
                if ti <= b + 1e-12:
                    t0, t1, seg = a, b, sol
                    break
            out[i] = seg(min(max(ti, t0), t1))
        if self._mask is not None:
            out[:, self._mask] = np.maximum(out[:, self._mask], 0.0)
        return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out


def _integrate_segment(problem: IvpProblem, t0, t1, x0, u):
    if t1 - t0 <= 0.0:
        raise ValueError("empty integration segment")
    fun = lambda t, x: problem.rhs(t, x, u)
    jac = None
    if problem.jacobian is not None:
        jac = lambda t, x: problem.jacobian(t, x, u)
    sol = _scipy_solve_ivp(
        fun, (t0, t1), x0, method="BDF", jac=jac,
        rtol=problem.rtol, atol=problem.atol, dense_output=True)
    if not sol.success:
        raise DivergenceError(
            f"integrator failed on [{t0:.6g}, {t1:.6g}]: {sol.message}")
    if not np.all(np.isfinite(sol.y[:, -1])):
        raise DivergenceError(f"non-finite state at t={t1:.6g}")
    return sol.sol, sol.y[:, -1]


def solve_ivp_problem(problem: IvpProblem, u=0.0) -> Trajectory:
    """Adaptive stiff integration of ``problem`` under constant input ``u``."""
    if problem.t1 == problem.t0:
        const = problem.x0.copy()
        seg = lambda t, c=const: c
        return Trajectory([(problem.t0, problem.t1, seg)], problem.nonnegative_mask)
    x0 = problem.x0.copy()
    if problem.nonnegative_mask is not None:
        x0[problem.nonnegative_mask] = np.maximum(x0[problem.nonnegative_mask], 0.0)
    dense, _ = _integrate_segment(problem, problem.t0, problem.t1, x0, u)
    return Trajectory([(problem.t0, problem.t1, dense)], problem.nonnegative_mask)


def integrate_piecewise(problem: IvpProblem, schedule: InputSchedule) -> Trajectory:
    """Integrate sequentially across the schedule's constant-input intervals.

    Each interval restarts the solver at the boundary so that short feeding
    pulses are never stepped over. The rhs receives the interval's feed rate
    as input value; the influent column is schedule metadata for callers
    whose model binds a constant composition.
    """
    pieces = schedule.slice(problem.t0, problem.t1)
    if not pieces:
        raise ValueError("schedule does not overlap the integration span")
    segments = []
    x = problem.x0.copy()
    if problem.nonnegative_mask is not None:
        x[problem.nonnegative_mask] = np.maximum(x[problem.nonnegative_mask], 0.0)
    for (a, b, feed, xi) in pieces:
        try:
            dense, x = _integrate_segment(problem, a, b, x, feed)
        except DivergenceError as err:
            raise DivergenceError(
                f"{err} (interval [{a:.6g}, {b:.6g}], feed={feed:.6g})") from err
        if problem.nonnegative_mask is not None:
            x = x.copy()
            x[problem.nonnegative_mask] = np.maximum(x[problem.nonnegative_mask], 0.0)
        segments.append((a, b, dense))
    return Trajectory(segments, problem.nonnegative_mask)


# ---------------------------------------------------------------------------
# joint mean/covariance propagation
# ---------------------------------------------------------------------------

def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _check_cov(P: np.ndarray, ceiling: float):
    d = np.diag(P)
    if not np.all(np.isfinite(d)):
        raise DivergenceError("non-finite covariance diagonal")
    if np.any(d > ceiling):
        raise DivergenceError(
            f"covariance diagonal exceeded ceiling {ceiling:.1e}")


def propagate_joint(f: Callable, F: Callable, Q: np.ndarray,
                    x0: np.ndarray, P0: np.ndarray,
                    intervals: Sequence, rtol: float = 1e-4,
                    atol: float = 1e-7,
                    with_transition: bool = False,
                    cov_ceiling: float = COV_DIAG_CEILING):
    """Propagate mean and covariance through the matrix Riccati equation.

    ``f(x, u)`` and ``F(x, u)`` are the model derivative and its state
    Jacobian; ``intervals`` is a sequence of ``(t0, t1, u)`` pieces of
    constant input. The joint system stacks the mean with the vectorized
    covariance (and, if requested, the state-transition matrix used to
    carry cross-covariance blocks); the solver's Newton matrix uses the
    block-diagonal Jacobian, omitting the covariance-by-state coupling.

    Returns ``(x1, P1)`` or ``(x1, P1, Phi)``.
    """
    n = len(x0)
    nn = n * n
    P0 = symmetrize(np.asarray(P0, dtype=float))
    _check_cov(P0, cov_ceiling)
    Q = np.asarray(Q, dtype=float)
    eye = np.eye(n)

    def rhs(t, z, u):
        x = z[:n]
        P = z[n:n + nn].reshape(n, n)
        Fm = F(x, u)
        dz = np.empty_like(z)
        dz[:n] = f(x, u)
        dz[n:n + nn] = (Fm @ P + P @ Fm.T + Q).ravel()
        if with_transition:
            Phi = z[n + nn:].reshape(n, n)
            dz[n + nn:] = (Fm @ Phi).ravel()
        return dz

    def jac(t, z, u):
        x = z[:n]
        Fm = F(x, u)
        m = len(z)
        J = np.zeros((m, m))
        J[:n, :n] = Fm
        kronFI = np.kron(Fm, eye)
        J[n:n + nn, n:n + nn] = kronFI + np.kron(eye, Fm)
        if with_transition:
            J[n + nn:, n + nn:] = kronFI
        return J

    z = np.concatenate([x0, P0.ravel()] + ([eye.ravel()] if with_transition else []))
    problem = IvpProblem(rhs=rhs, jacobian=jac, t0=intervals[0][0],
                         t1=intervals[-1][1], x0=z, rtol=rtol, atol=atol)
    for (a, b, u) in intervals:
        if b - a <= 0.0:
            continue
        _, z = _integrate_segment(problem, a, b, z, u)
    x1 = z[:n]
    P1 = symmetrize(z[n:n + nn].reshape(n, n))
    _check_cov(P1, cov_ceiling)
    if with_transition:
        return x1, P1, z[n + nn:].reshape(n, n)
    return x1, P1
