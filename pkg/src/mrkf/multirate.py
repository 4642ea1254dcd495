"""Sample-state augmentation on top of the EKF core.

While an offline lab sample is pending, the filter state carries a copy of
the plant state at the sample time; the delayed result is fused against
that copy when it returns, then the copy is dropped. Two fusion modes are
provided:

``exact``
    Joint-smoother bookkeeping: sample blocks are created with their true
    cross-covariances and participate in every update. On linear systems
    this reproduces filter recalculation to machine precision at all times
    (the acceptance oracles pin this).

``frozen``
    Indicator-matrix bookkeeping: minor updates premultiply the Kalman
    gain with a 0/1 block mask so stored sample blocks stay untouched
    until their return, and concurrently pending samples are created
    uncorrelated. Cheaper and simpler to reason about, but during delay
    windows with informative online data it deviates from recalculation
    at first order in the corrections.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ekf
from .ekf import CLIP_EPS, GaussianBelief, ModelHooks, NormalizationMaps, NoiseConfig
from .events import (OnlineMeasurement, OfflineReturn, SampleDrawn,
                     ONLINE_SIGNALS, grid_index, sort_events)
from .odeengine import DivergenceError, InputSchedule, propagate_joint, symmetrize
from .runlog import RunLog, STATUS_DIVERGED, STATUS_TIMEOUT

FUSION_EXACT = "exact"
FUSION_FROZEN = "frozen"

MAX_AUGMENTATION = 5


class AugmentationOverflow(RuntimeError):
    """More pending samples than the configured ceiling."""


@dataclass(frozen=True)
class PendingSample:
    sample_id: str
    t_s: float
    signals: tuple
    block: int  # 1-based block index in the augmented vector


@dataclass
class AugmentedBelief:
    """Gaussian belief over the online block plus pending sample blocks."""

    base: GaussianBelief
    registry: list = field(default_factory=list)
    n: int = 14

    def __post_init__(self):
        expected = self.n * (1 + len(self.registry))
        if self.base.mean.size != expected:
            raise ValueError("augmented dimension does not match registry")

    @property
    def t(self) -> float:
        return self.base.t

    @property
    def n_aug(self) -> int:
        return len(self.registry)

    def online(self) -> GaussianBelief:
        n = self.n
        return GaussianBelief(self.base.t, self.base.mean[:n].copy(),
                              self.base.cov[:n, :n].copy())

    def block_mean(self, block: int) -> np.ndarray:
        n = self.n
        return self.base.mean[block * n:(block + 1) * n]

    def block_cov(self, row: int, col: int) -> np.ndarray:
        n = self.n
        return self.base.cov[row * n:(row + 1) * n, col * n:(col + 1) * n]

    def copy(self) -> "AugmentedBelief":
        return AugmentedBelief(self.base.copy(), list(self.registry), self.n)


def from_belief(belief: GaussianBelief, n: int | None = None) -> AugmentedBelief:
    return AugmentedBelief(belief.copy(), [], n if n is not None else belief.mean.size)


def augment(belief: AugmentedBelief, sample_id: str, signals: tuple,
            fusion: str = FUSION_EXACT,
            max_augmentation: int = MAX_AUGMENTATION) -> AugmentedBelief:
    """Append a copy of the online block as a new pending sample-state.

    The new block duplicates the online mean and online covariance row.
    In ``frozen`` mode its cross blocks to other pending samples are
    zeroed (samples treated as mutually independent); in ``exact`` mode
    they inherit the online block's current cross-covariances.
    """
    if belief.n_aug >= max_augmentation:
        raise AugmentationOverflow(
            f"{belief.n_aug} samples pending, ceiling {max_augmentation}")
    n, d = belief.n, belief.base.mean.size
    mean = np.concatenate([belief.base.mean, belief.base.mean[:n]])
    cov = np.zeros((d + n, d + n))
    cov[:d, :d] = belief.base.cov
    if fusion == FUSION_EXACT:
        cov[d:, :d] = belief.base.cov[:n, :d]
        cov[:d, d:] = belief.base.cov[:d, :n]
    else:
        cov[d:, :n] = belief.base.cov[:n, :n]
        cov[:n, d:] = belief.base.cov[:n, :n]
    cov[d:, d:] = belief.base.cov[:n, :n]
    sample = PendingSample(sample_id, belief.t, tuple(signals),
                           block=1 + belief.n_aug)
    return AugmentedBelief(GaussianBelief(belief.t, mean, symmetrize(cov)),
                           belief.registry + [sample], n)


def deaugment(belief: AugmentedBelief, sample_ids) -> AugmentedBelief:
    """Delete the blocks of returned samples and reindex the registry."""
    n = belief.n
    drop = set(sample_ids)
    keep = np.ones(belief.base.mean.size, dtype=bool)
    new_reg = []
    for s in belief.registry:
        if s.sample_id in drop:
            keep[s.block * n:(s.block + 1) * n] = False
        else:
            new_reg.append(replace(s, block=1 + len(new_reg)))
    mean = belief.base.mean[keep]
    cov = belief.base.cov[np.ix_(keep, keep)]
    return AugmentedBelief(GaussianBelief(belief.t, mean, cov), new_reg, n)


def build_indicator(n: int, registry, returning) -> np.ndarray:
    """0/1 block-diagonal mask: online block plus exactly the returning samples."""
    ids = {s.sample_id for s in registry}
    unknown = set(returning) - ids
    if unknown:
        raise KeyError(f"unknown sample ids {sorted(unknown)}")
    d = n * (1 + len(registry))
    M = np.zeros((d, d))
    M[:n, :n] = np.eye(n)
    for s in registry:
        if s.sample_id in returning:
            lo = s.block * n
            M[lo:lo + n, lo:lo + n] = np.eye(n)
    return M


def ode_step_fn(hooks: ModelHooks, intervals, Q: np.ndarray,
                rtol: float = 1e-4, atol: float = 1e-7):
    """One-step propagator backed by the joint mean/covariance integration."""
    def step(x, P, need_phi):
        if need_phi:
            return propagate_joint(hooks.f, hooks.F, Q, x, P, intervals,
                                   rtol=rtol, atol=atol, with_transition=True)
        x1, P1 = propagate_joint(hooks.f, hooks.F, Q, x, P, intervals,
                                 rtol=rtol, atol=atol)
        return x1, P1, None
    return step


def propagate_augmented(belief: AugmentedBelief, step_fn,
                        t_next: float) -> AugmentedBelief:
    """Time update of the augmented belief.

    ``step_fn(x, P, need_phi) -> (x1, P1, Phi)`` advances the online block;
    cross blocks are carried by the state-transition matrix Phi of the same
    linearized dynamics, and sample blocks are held constant by structure
    (their rows of the augmented dynamics and process noise are zero).
    """
    n = belief.n
    if t_next <= belief.t:
        raise ValueError("t_next must be greater than belief.t")
    if belief.n_aug == 0:
        x1, P1, _ = step_fn(belief.base.mean, belief.base.cov, False)
        return AugmentedBelief(GaussianBelief(t_next, x1, symmetrize(P1)), [], n)
    x1, P1, Phi = step_fn(belief.base.mean[:n], belief.block_cov(0, 0), True)
    mean = belief.base.mean.copy()
    mean[:n] = x1
    cov = belief.base.cov.copy()
    cov[:n, :n] = symmetrize(P1)
    for s in belief.registry:
        lo = s.block * n
        cross = Phi @ belief.base.cov[:n, lo:lo + n]
        cov[:n, lo:lo + n] = cross
        cov[lo:lo + n, :n] = cross.T
    return AugmentedBelief(GaussianBelief(t_next, mean, cov),
                           list(belief.registry), n)


def _stack_rows(belief: AugmentedBelief, hooks: ModelHooks,
                online_mask, returning_samples, r_diag_full):
    """Assemble measurement rows: online signals first, then one block of
    offline rows per returning sample (evaluated at its stored sample-state)."""
    n, d = belief.n, belief.base.mean.size
    rows_h, rows_H, rows_r = [], [], []
    if online_mask is not None and online_mask.any():
        idx = np.flatnonzero(online_mask)
        x_on = belief.base.mean[:n]
        h_on = hooks.h(x_on)[idx]
        H_on = np.zeros((len(idx), d))
        H_on[:, :n] = hooks.H(x_on)[idx, :]
        rows_h.append(h_on)
        rows_H.append(H_on)
        rows_r.append(r_diag_full[idx])
    for s in returning_samples:
        lo = s.block * n
        x_s = belief.base.mean[lo:lo + n]
        idx = np.array(s.signals, dtype=int)
        h_off = hooks.h(x_s)[idx]
        H_off = np.zeros((len(idx), d))
        H_off[:, lo:lo + n] = hooks.H(x_s)[idx, :]
        rows_h.append(h_off)
        rows_H.append(H_off)
        rows_r.append(r_diag_full[idx])
    return (np.concatenate(rows_h), np.vstack(rows_H), np.concatenate(rows_r))


def update_minor(prior: AugmentedBelief, y_online: np.ndarray,
                 hooks: ModelHooks, r_diag_full: np.ndarray,
                 online_mask: np.ndarray | None = None,
                 fusion: str = FUSION_EXACT):
    """Measurement update with online signals only (delay period)."""
    n = prior.n
    if online_mask is None:
        online_mask = np.zeros(hooks.n_outputs, dtype=bool)
        online_mask[list(ONLINE_SIGNALS)] = True
    h_pred, H, r = _stack_rows(prior, hooks, online_mask, [], r_diag_full)
    mask = None
    if fusion == FUSION_FROZEN and prior.n_aug > 0:
        mask = build_indicator(n, prior.registry, set())
    innovation = y_online - h_pred
    mean, cov, info = ekf.joseph_update(prior.base.mean, prior.base.cov,
                                        innovation, H, np.diag(r), mask)
    post = AugmentedBelief(GaussianBelief(prior.t, mean, cov),
                           list(prior.registry), n)
    return post, info


def update_major(prior: AugmentedBelief, returns: dict,
                 hooks: ModelHooks, r_diag_full: np.ndarray,
                 y_online: np.ndarray | None = None,
                 online_mask: np.ndarray | None = None,
                 fusion: str = FUSION_EXACT):
    """Measurement update at offline return(s); returned blocks are dropped.

    ``returns`` maps pending sample ids to their measured values. Online
    rows are included when ``y_online`` is given; otherwise they are
    reduced away. The offline prediction is evaluated at the stored
    sample-state block of each returning sample.
    """
    if not returns:
        raise ValueError("major update requires at least one return")
    n = prior.n
    by_id = {s.sample_id: s for s in prior.registry}
    unknown = set(returns) - set(by_id)
    if unknown:
        raise KeyError(f"unknown sample ids {sorted(unknown)}")
    returning = [s for s in prior.registry if s.sample_id in returns]

    if online_mask is None:
        online_mask = np.zeros(hooks.n_outputs, dtype=bool)
        online_mask[list(ONLINE_SIGNALS)] = True
    if y_online is None:
        online_mask = np.zeros(hooks.n_outputs, dtype=bool)
    h_pred, H, r = _stack_rows(prior, hooks, online_mask, returning, r_diag_full)

    y_parts = []
    if y_online is not None and online_mask.any():
        y_parts.append(np.asarray(y_online, dtype=float))
    for s in returning:
        vals = np.atleast_1d(np.asarray(returns[s.sample_id], dtype=float))
        if vals.size != len(s.signals):
            raise ValueError(f"return for {s.sample_id} has wrong dimension")
        y_parts.append(vals)
    y = np.concatenate(y_parts)

    mask = None
    if fusion == FUSION_FROZEN:
        mask = build_indicator(n, prior.registry,
                               {s.sample_id for s in returning})
    mean, cov, info = ekf.joseph_update(prior.base.mean, prior.base.cov,
                                        y - h_pred, H, np.diag(r), mask)
    post = AugmentedBelief(GaussianBelief(prior.t, mean, cov),
                           list(prior.registry), n)
    post = deaugment(post, set(returns))
    return post, info, [s.sample_id for s in returning]


# ---------------------------------------------------------------------------
# full multirate run
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultirateOptions:
    fusion: str = FUSION_EXACT
    max_augmentation: int = MAX_AUGMENTATION
    clip_eps: float = CLIP_EPS
    rtol: float = 1e-4
    atol: float = 1e-7
    dt_days: float = 1.0 / 24.0
    deadline_secs: float | None = None
    on_step: object = None  # callback(belief) after each logged step


def _group_events(events, dt_days):
    grouped = {}
    for ev in sort_events(events):
        k = grid_index(ev.t, dt_days)
        slot = grouped.setdefault(k, {"online": None, "samples": [], "returns": []})
        if isinstance(ev, OnlineMeasurement):
            if slot["online"] is not None:
                raise ValueError(f"duplicate online event at step {k}")
            slot["online"] = ev
        elif isinstance(ev, SampleDrawn):
            slot["samples"].append(ev)
        elif isinstance(ev, OfflineReturn):
            slot["returns"].append(ev)
    return grouped


def _clip_online(belief: AugmentedBelief, eps: float) -> AugmentedBelief:
    clipped = ekf.clip_prior(belief.base, eps, n_online=belief.n)
    return AugmentedBelief(clipped, list(belief.registry), belief.n)


def run_multirate(hooks: ModelHooks, maps: NormalizationMaps,
                  noise: NoiseConfig, schedule: InputSchedule,
                  events, x0_norm: np.ndarray, t_end: float,
                  options: MultirateOptions = MultirateOptions()) -> RunLog:
    """Run the multirate filter over a time-ordered event stream.

    Per grid step: clip, time update, then the measurement update (major
    when a pending sample returns, minor otherwise), then augmentation for
    samples drawn at this step. Zero-delay returns (sample and return on
    the same step) are fused as one stacked update without creating a
    registry entry. Divergence or the cooperative deadline mark the run
    failed; the partial log is returned.
    """
    n, q = hooks.n_states, hooks.n_outputs
    dt = options.dt_days
    Q = np.diag(noise.Q_diag)
    r_full = noise.r_diag_normalized(maps)
    grouped = _group_events(events, dt)
    n_steps = grid_index(t_end, dt)

    belief = from_belief(GaussianBelief(0.0, np.asarray(x0_norm, dtype=float),
                                        noise.p0(n)), n)
    log = RunLog()
    started = time.monotonic()

    def log_step(b: AugmentedBelief):
        x_on = b.base.mean[:n]
        P_on = b.block_cov(0, 0)
        log.log_step(b.t, maps.denormalize_x(x_on),
                     np.diag(maps.denormalize_cov(P_on)).copy(),
                     maps.denormalize_y(hooks.h(x_on)),
                     np.trace(P_on), b.n_aug)

    def handle_step(b: AugmentedBelief, k: int) -> AugmentedBelief:
        slot = grouped.get(k)
        if slot is None:
            return b
        online = slot["online"]
        y_on = None
        if online is not None:
            y_on = np.asarray(online.values) / maps.T_y[list(ONLINE_SIGNALS)]
        sample_ids_here = {s.sample_id for s in slot["samples"]}
        registered = {r.sample_id: r for r in slot["returns"]
                      if r.sample_id not in sample_ids_here}
        zero_delay = [r for r in slot["returns"] if r.sample_id in sample_ids_here]

        if registered:
            rets = {}
            for sid, ev in registered.items():
                rets[sid] = np.asarray(ev.values) / maps.T_y[list(ev.signals)]
            b, info, _ = update_major(b, rets, hooks, r_full, y_online=y_on,
                                      fusion=options.fusion)
            log.log_update(b.t, info["q_av"], info["nis"])
        elif y_on is not None or zero_delay:
            # minor update; zero-delay offline rows join as a stacked
            # single-rate update of the current state
            mask = np.zeros(q, dtype=bool)
            y_parts = []
            if y_on is not None:
                mask[list(ONLINE_SIGNALS)] = True
                y_parts.append(y_on)
            for ev in zero_delay:
                mask[list(ev.signals)] = True
                y_parts.append(np.asarray(ev.values) / maps.T_y[list(ev.signals)])
            y_stack = np.concatenate(y_parts)
            h_pred, H, r = _stack_rows(b, hooks, mask, [], r_full)
            gain_mask = None
            if options.fusion == FUSION_FROZEN and b.n_aug > 0:
                gain_mask = build_indicator(n, b.registry, set())
            mean, cov, info = ekf.joseph_update(
                b.base.mean, b.base.cov, y_stack - h_pred, H, np.diag(r),
                gain_mask)
            b = AugmentedBelief(GaussianBelief(b.t, mean, cov),
                                list(b.registry), n)
            log.log_update(b.t, info["q_av"], info["nis"])

        zero_ids = {r.sample_id for r in zero_delay}
        for sample in slot["samples"]:
            if sample.sample_id in zero_ids:
                continue
            b = augment(b, sample.sample_id, sample.signals,
                        fusion=options.fusion,
                        max_augmentation=options.max_augmentation)
        return b

    try:
        belief = handle_step(belief, 0)
        log_step(belief)
        if options.on_step is not None:
            options.on_step(belief)
        for k in range(1, n_steps + 1):
            if options.deadline_secs is not None and \
                    time.monotonic() - started > options.deadline_secs:
                log.status = STATUS_TIMEOUT
                log.failure = f"deadline {options.deadline_secs}s exceeded"
                break
            t0, t1 = (k - 1) * dt, k * dt
            belief = _clip_online(belief, options.clip_eps)
            intervals = [(a, b_, feed) for (a, b_, feed, _xi)
                         in schedule.slice(t0, t1)]
            step_fn = ode_step_fn(hooks, intervals, Q,
                                  rtol=options.rtol, atol=options.atol)
            belief = propagate_augmented(belief, step_fn, t1)
            belief = handle_step(belief, k)
            if not np.all(np.isfinite(belief.base.mean)):
                raise DivergenceError("non-finite posterior mean")
            log_step(belief)
            if options.on_step is not None:
                options.on_step(belief)
    except (DivergenceError, AugmentationOverflow) as err:
        log.status = STATUS_DIVERGED
        log.failure = str(err)
    log.wall_time = time.monotonic() - started
    return log
