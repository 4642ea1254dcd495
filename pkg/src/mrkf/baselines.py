"""Reference methods for delayed-measurement fusion.

Filter recalculation re-runs the delay window once the offline value is
known and applies to any model; it is the optimality yardstick used by the
test oracles. Alexander's method and Larsen's parallel filter apply to
linear time-invariant systems: Alexander pre-incorporates the offline row
into the covariance at the sample time and corrects the state at the
return, Larsen bridges the interim with a second ordinary filter. All
measurement updates share the Joseph-form path of the EKF core.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ekf
from .ekf import GaussianBelief
from .events import OnlineMeasurement, OfflineReturn, SampleDrawn, grid_index, sort_events
from .odeengine import symmetrize
from .runlog import RunLog


@dataclass(frozen=True)
class LinearSystem:
    """Discrete-time LTI system with online and offline output blocks."""

    A: np.ndarray
    B: np.ndarray
    C_on: np.ndarray
    C_off: np.ndarray
    Q_d: np.ndarray
    R_on: np.ndarray
    R_off: np.ndarray

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        for name in ("Q_d", "R_on", "R_off"):
            M = getattr(self, name)
            if np.max(np.abs(M - M.T)) > 1e-12:
                raise ValueError(f"{name} must be symmetric")
            if np.any(np.linalg.eigvalsh(M) < -1e-12):
                raise ValueError(f"{name} must be positive semidefinite")
        if self.C_on.shape[1] != n or self.C_off.shape[1] != n:
            raise ValueError("output matrices must have n columns")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def q_on(self) -> int:
        return self.C_on.shape[0]

    @property
    def q_off(self) -> int:
        return self.C_off.shape[0]


def _lti_predict(system: LinearSystem, mean, cov, u=None):
    mean = system.A @ mean
    if u is not None:
        mean = mean + system.B @ u
    cov = symmetrize(system.A @ cov @ system.A.T + system.Q_d)
    return mean, cov


def _collect_steps(events):
    """Index events by integer grid step (dt = 1 for LTI streams)."""
    steps = {}
    for ev in sort_events(events):
        k = grid_index(ev.t, 1.0)
        slot = steps.setdefault(k, {"online": None, "samples": [], "returns": []})
        if isinstance(ev, OnlineMeasurement):
            slot["online"] = ev
        elif isinstance(ev, SampleDrawn):
            slot["samples"].append(ev)
        elif isinstance(ev, OfflineReturn):
            slot["returns"].append(ev)
    return steps


@dataclass
class LtiRunLog:
    """Per-step posterior means/covariances plus an update-cost counter."""

    means: dict = field(default_factory=dict)
    covs: dict = field(default_factory=dict)
    update_calls: dict = field(default_factory=dict)

    def log(self, k, mean, cov, calls):
        self.means[k] = np.array(mean)
        self.covs[k] = np.array(cov)
        self.update_calls[k] = calls


def plain_kf(events, system: LinearSystem, m0, P0, t_end: int,
             inputs=None) -> LtiRunLog:
    """Ordinary linear Kalman filter ignoring any offline events."""
    steps = _collect_steps(events)
    log = LtiRunLog()
    mean, cov = np.array(m0, dtype=float), np.array(P0, dtype=float)
    for k in range(t_end + 1):
        calls = 0
        if k > 0:
            u = None if inputs is None else inputs.get(k - 1)
            mean, cov = _lti_predict(system, mean, cov, u)
        slot = steps.get(k)
        if slot and slot["online"] is not None:
            y = np.asarray(slot["online"].values, dtype=float)
            mean, cov, _ = ekf.joseph_update(mean, cov, y - system.C_on @ mean,
                                             system.C_on, system.R_on)
            calls += 1
        log.log(k, mean, cov, calls)
    return log


def recalculation_filter_lti(events, system: LinearSystem, m0, P0,
                             t_end: int, inputs=None) -> LtiRunLog:
    """Optimal filtering with delayed values: refilter from scratch at each
    step using every measurement whose value has arrived by that step."""
    steps = _collect_steps(events)
    sample_step = {}
    for k, slot in steps.items():
        for s in slot["samples"]:
            sample_step[s.sample_id] = k
    log = LtiRunLog()
    known = {}
    return_step = {}
    for now in range(t_end + 1):
        slot = steps.get(now)
        if slot:
            for r in slot["returns"]:
                known[r.sample_id] = np.asarray(r.values, dtype=float)
                return_step[r.sample_id] = now
        mean, cov = np.array(m0, dtype=float), np.array(P0, dtype=float)
        for k in range(now + 1):
            if k > 0:
                u = None if inputs is None else inputs.get(k - 1)
                mean, cov = _lti_predict(system, mean, cov, u)
            kslot = steps.get(k)
            rows_C, rows_R, rows_y = [], [], []
            if kslot and kslot["online"] is not None:
                rows_C.append(system.C_on)
                rows_R.append(system.R_on)
                rows_y.append(np.asarray(kslot["online"].values, dtype=float))
            if kslot:
                for s in kslot["samples"]:
                    sid = s.sample_id
                    if sid in known and return_step[sid] <= now:
                        rows_C.append(system.C_off)
                        rows_R.append(system.R_off)
                        rows_y.append(known[sid])
            if rows_C:
                C = np.vstack(rows_C)
                R = np.zeros((C.shape[0], C.shape[0]))
                ofs = 0
                for Ri in rows_R:
                    q = Ri.shape[0]
                    R[ofs:ofs + q, ofs:ofs + q] = Ri
                    ofs += q
                y = np.concatenate(rows_y)
                mean, cov, _ = ekf.joseph_update(mean, cov, y - C @ mean, C, R)
        log.log(now, mean, cov, 0)
    return log


def _validate_nonoverlapping(steps, t_end):
    spans = []
    for k, slot in sorted(steps.items()):
        for s in slot["samples"]:
            r_k = None
            for kk, sl in steps.items():
                for r in sl["returns"]:
                    if r.sample_id == s.sample_id:
                        r_k = kk
            if r_k is None:
                raise ValueError(f"sample {s.sample_id} never returns")
            spans.append((k, r_k, s.sample_id))
    spans.sort()
    for (a0, b0, i0), (a1, b1, i1) in zip(spans, spans[1:]):
        if a1 <= b0:
            raise ValueError(
                f"overlapping delay windows ({i0}: [{a0},{b0}] vs {i1}: [{a1},{b1}]); "
                "this method handles one pending sample at a time")
    return {sid: (a, b) for a, b, sid in spans}


def alexander_filter(events, system: LinearSystem, m0, P0, t_end: int,
                     inputs=None) -> LtiRunLog:
    """Premature-gain filtering with an end-of-delay state correction.

    At the sample time the offline row is fused into the covariance only
    (its value is unknown); the gains of the following online updates are
    therefore computed as if the offline row were present. At the return,
    the missing state correction is propagated through the accumulated
    product of update/prediction factors and added after the online fusion.
    The covariance needs no correction.
    """
    steps = _collect_steps(events)
    _validate_nonoverlapping(steps, t_end)
    log = LtiRunLog()
    mean, cov = np.array(m0, dtype=float), np.array(P0, dtype=float)
    n = system.n
    pending = None  # (sample_id, gain at sample time, stored posterior mean, M_delta)
    for k in range(t_end + 1):
        calls = 0
        if k > 0:
            u = None if inputs is None else inputs.get(k - 1)
            mean, cov = _lti_predict(system, mean, cov, u)
            if pending is not None:
                sid, K_off, m_s, M_delta = pending
                pending = (sid, K_off, m_s, system.A @ M_delta)
        slot = steps.get(k, {"online": None, "samples": [], "returns": []})
        if slot["online"] is not None:
            y = np.asarray(slot["online"].values, dtype=float)
            S = system.C_on @ cov @ system.C_on.T + system.R_on
            K = cov @ system.C_on.T @ np.linalg.inv(S)
            mean = mean + K @ (y - system.C_on @ mean)
            IKH = np.eye(n) - K @ system.C_on
            cov = symmetrize(IKH @ cov @ IKH.T + K @ system.R_on @ K.T)
            calls += 1
            if pending is not None:
                sid, K_off, m_s, M_delta = pending
                pending = (sid, K_off, m_s, IKH @ M_delta)
        same_step = {s.sample_id for s in slot["samples"]}

        def apply_return(r):
            nonlocal mean, pending
            sid, K_off, m_s, M_delta = pending
            if sid != r.sample_id:
                raise ValueError(f"return of unknown sample {r.sample_id}")
            y_off = np.asarray(r.values, dtype=float)
            mean = mean + M_delta @ K_off @ (y_off - system.C_off @ m_s)
            pending = None

        for r in slot["returns"]:
            if r.sample_id not in same_step:
                if pending is None:
                    raise ValueError(f"return of unknown sample {r.sample_id}")
                apply_return(r)
        for s in slot["samples"]:
            if pending is not None:
                raise ValueError("overlapping samples not supported")
            # fuse the offline row into the covariance only; remember the
            # offline gain and the posterior the innovation refers to
            S_off = system.C_off @ cov @ system.C_off.T + system.R_off
            K_off = cov @ system.C_off.T @ np.linalg.inv(S_off)
            IKH = np.eye(n) - K_off @ system.C_off
            m_s = mean.copy()
            cov = symmetrize(IKH @ cov @ IKH.T + K_off @ system.R_off @ K_off.T)
            pending = (s.sample_id, K_off, m_s, np.eye(n))
        for r in slot["returns"]:
            if r.sample_id in same_step:
                apply_return(r)  # zero delay: empty product, immediate fix
        log.log(k, mean, cov, calls)
    return log


def larsen_parallel(events, system: LinearSystem, m0, P0, t_end: int,
                    inputs=None) -> LtiRunLog:
    """Alexander's filter plus an ordinary shadow filter during delays.

    The shadow filter starts from the posterior at the sample time and
    fuses only online measurements, so its estimates are optimal while the
    offline value is still missing; at the return the corrected main
    filter takes over. The reported log is optimal at every step at twice
    the update cost during delay windows.
    """
    steps = _collect_steps(events)
    _validate_nonoverlapping(steps, t_end)
    log = LtiRunLog()
    mean, cov = np.array(m0, dtype=float), np.array(P0, dtype=float)
    n = system.n
    pending = None
    shadow = None  # (mean, cov) ordinary filter bridging the delay
    for k in range(t_end + 1):
        calls = 0
        if k > 0:
            u = None if inputs is None else inputs.get(k - 1)
            mean, cov = _lti_predict(system, mean, cov, u)
            if pending is not None:
                sid, K_off, m_s, M_delta = pending
                pending = (sid, K_off, m_s, system.A @ M_delta)
            if shadow is not None:
                shadow = _lti_predict(system, *shadow, u)
        slot = steps.get(k, {"online": None, "samples": [], "returns": []})
        if slot["online"] is not None:
            y = np.asarray(slot["online"].values, dtype=float)
            S = system.C_on @ cov @ system.C_on.T + system.R_on
            K = cov @ system.C_on.T @ np.linalg.inv(S)
            mean = mean + K @ (y - system.C_on @ mean)
            IKH = np.eye(n) - K @ system.C_on
            cov = symmetrize(IKH @ cov @ IKH.T + K @ system.R_on @ K.T)
            calls += 1
            if pending is not None:
                sid, K_off, m_s, M_delta = pending
                pending = (sid, K_off, m_s, IKH @ M_delta)
            if shadow is not None:
                sm, sc = shadow
                sm, sc, _ = ekf.joseph_update(sm, sc, y - system.C_on @ sm,
                                              system.C_on, system.R_on)
                shadow = (sm, sc)
                calls += 1
        same_step = {s.sample_id for s in slot["samples"]}

        def apply_return(r):
            nonlocal mean, pending, shadow
            sid, K_off, m_s, M_delta = pending
            if sid != r.sample_id:
                raise ValueError(f"return of unknown sample {r.sample_id}")
            y_off = np.asarray(r.values, dtype=float)
            mean = mean + M_delta @ K_off @ (y_off - system.C_off @ m_s)
            pending = None
            shadow = None

        for r in slot["returns"]:
            if r.sample_id not in same_step:
                if pending is None:
                    raise ValueError(f"return of unknown sample {r.sample_id}")
                apply_return(r)
        for s in slot["samples"]:
            if pending is not None:
                raise ValueError("overlapping samples not supported")
            shadow = (mean.copy(), cov.copy())
            S_off = system.C_off @ cov @ system.C_off.T + system.R_off
            K_off = cov @ system.C_off.T @ np.linalg.inv(S_off)
            IKH = np.eye(n) - K_off @ system.C_off
            m_s = mean.copy()
            cov = symmetrize(IKH @ cov @ IKH.T + K_off @ system.R_off @ K_off.T)
            pending = (s.sample_id, K_off, m_s, np.eye(n))
        for r in slot["returns"]:
            if r.sample_id in same_step:
                apply_return(r)  # zero delay: empty product, immediate fix
        # report: shadow during the delay, main filter otherwise
        if shadow is not None:
            log.log(k, shadow[0], shadow[1], calls)
        else:
            log.log(k, mean, cov, calls)
    return log


def multirate_lti(events, system: LinearSystem, m0, P0, t_end: int,
                  fusion: str = "exact", inputs=None,
                  max_augmentation: int = 100) -> LtiRunLog:
    """Sample-state-augmentation filter on an LTI system.

    Drives the same augmentation, indicator and Joseph-update machinery as
    the plant filter, with the matrix one-step propagator. The log reports
    the online block.
    """
    from . import multirate as mr
    from .ekf import ModelHooks

    n, q_on, q_off = system.n, system.q_on, system.q_off
    q = q_on + q_off
    hooks = ModelHooks(
        n_states=n, n_outputs=q,
        f=None, F=None,
        h=lambda x: np.concatenate([system.C_on @ x, system.C_off @ x]),
        H=lambda x: np.vstack([system.C_on, system.C_off]))
    r_full = np.concatenate([np.diag(system.R_on), np.diag(system.R_off)])
    on_mask = np.zeros(q, dtype=bool)
    on_mask[:q_on] = True
    off_signals = tuple(range(q_on, q))

    steps = _collect_steps(events)
    log = LtiRunLog()
    belief = mr.from_belief(GaussianBelief(0.0, np.array(m0, dtype=float),
                                           np.array(P0, dtype=float)), n)

    def step_fn_factory(u):
        def step(x, P, need_phi):
            x1 = system.A @ x
            if u is not None:
                x1 = x1 + system.B @ u
            P1 = system.A @ P @ system.A.T + system.Q_d
            return x1, P1, (system.A if need_phi else None)
        return step

    for k in range(t_end + 1):
        calls = 0
        if k > 0:
            u = None if inputs is None else inputs.get(k - 1)
            belief = mr.propagate_augmented(belief, step_fn_factory(u), float(k))
        slot = steps.get(k, {"online": None, "samples": [], "returns": []})
        y_on = None
        if slot["online"] is not None:
            y_on = np.asarray(slot["online"].values, dtype=float)
        sample_ids_here = {s.sample_id for s in slot["samples"]}
        registered = {r.sample_id: np.asarray(r.values, dtype=float)
                      for r in slot["returns"] if r.sample_id not in sample_ids_here}
        zero_delay = [r for r in slot["returns"] if r.sample_id in sample_ids_here]
        if registered:
            belief, _, _ = mr.update_major(belief, registered, hooks, r_full,
                                           y_online=y_on, online_mask=on_mask,
                                           fusion=fusion)
            calls += 1
        elif y_on is not None or zero_delay:
            mask = on_mask.copy() if y_on is not None else np.zeros(q, dtype=bool)
            y_parts = [y_on] if y_on is not None else []
            for ev in zero_delay:
                mask[list(ev.signals)] = True
                y_parts.append(np.asarray(ev.values, dtype=float))
            h_pred, H, r = mr._stack_rows(belief, hooks, mask, [], r_full)
            gain_mask = None
            if fusion == "frozen" and belief.n_aug > 0:
                gain_mask = mr.build_indicator(n, belief.registry, set())
            mean, cov, _ = ekf.joseph_update(belief.base.mean, belief.base.cov,
                                             np.concatenate(y_parts) - h_pred,
                                             H, np.diag(r), gain_mask)
            belief = mr.AugmentedBelief(GaussianBelief(belief.t, mean, cov),
                                        list(belief.registry), n)
            calls += 1
        zero_ids = {r.sample_id for r in zero_delay}
        for s in slot["samples"]:
            if s.sample_id in zero_ids:
                continue
            belief = mr.augment(belief, s.sample_id, s.signals or off_signals,
                                fusion=fusion,
                                max_augmentation=max_augmentation)
        log.log(k, belief.base.mean[:n], belief.block_cov(0, 0), calls)
    return log


# ---------------------------------------------------------------------------
# nonlinear recalculation (oracle for the multirate filter)
# ---------------------------------------------------------------------------

def recalculation_filter(hooks, maps, noise, schedule, events, x0_norm,
                         t_end, options=None) -> RunLog:
    """Filter recalculation on the nonlinear model.

    Runs a single-rate EKF over the online grid; when an offline value
    returns, the filter rewinds to the stored belief before its sample
    step, fuses the now-complete measurement vector there and re-passes
    the delay window. Shares the step primitives (clipping, joint
    propagation, Joseph updates) with the multirate filter.
    """
    from .multirate import MultirateOptions

    if options is None:
        options = MultirateOptions()
    n, q = hooks.n_states, hooks.n_outputs
    dt = options.dt_days
    Q = np.diag(noise.Q_diag)
    r_full = noise.r_diag_normalized(maps)
    from .events import ONLINE_SIGNALS
    from .multirate import _group_events
    grouped = _group_events(events, dt)
    n_steps = grid_index(t_end, dt)

    sample_at = {}
    for k, slot in grouped.items():
        for s in slot["samples"]:
            sample_at[s.sample_id] = (k, s.signals)

    known = {}

    def fuse(belief: GaussianBelief, k: int) -> GaussianBelief:
        slot = grouped.get(k)
        if slot is None:
            return belief
        mask = np.zeros(q, dtype=bool)
        y_parts = []
        if slot["online"] is not None:
            mask[list(ONLINE_SIGNALS)] = True
            y_parts.append(np.asarray(slot["online"].values)
                           / maps.T_y[list(ONLINE_SIGNALS)])
        off_rows = []
        for s in slot["samples"]:
            if s.sample_id in known:
                off_rows.append((s.signals, known[s.sample_id]))
        for signals, values in off_rows:
            mask[list(signals)] = True
            y_parts.append(np.asarray(values) / maps.T_y[list(signals)])
        if not y_parts:
            return belief
        y = np.concatenate(y_parts)
        h_pred = hooks.h(belief.mean)[mask]
        H = hooks.H(belief.mean)[mask, :]
        mean, cov, _ = ekf.joseph_update(belief.mean, belief.cov, y - h_pred,
                                         H, np.diag(r_full[mask]))
        return GaussianBelief(belief.t, mean, cov)

    def advance(belief: GaussianBelief, k: int) -> GaussianBelief:
        t0, t1 = (k - 1) * dt, k * dt
        belief = ekf.clip_prior(belief, options.clip_eps)
        intervals = [(a, b, feed) for (a, b, feed, _xi) in schedule.slice(t0, t1)]
        return ekf.time_update(belief, hooks, intervals, Q, t1,
                               rtol=options.rtol, atol=options.atol)

    priors, posts = {}, {}
    belief = GaussianBelief(0.0, np.asarray(x0_norm, dtype=float), noise.p0(n))
    priors[0] = belief.copy()
    belief = fuse(belief, 0)
    posts[0] = belief.copy()
    log = RunLog()
    log.log_step(0.0, maps.denormalize_x(belief.mean),
                 np.diag(maps.denormalize_cov(belief.cov)).copy(),
                 maps.denormalize_y(hooks.h(belief.mean)),
                 np.trace(belief.cov), 0)

    for k in range(1, n_steps + 1):
        slot = grouped.get(k, None)
        rewind_to = None
        if slot:
            for r in slot["returns"]:
                known[r.sample_id] = r.values
                ks, _ = sample_at.get(r.sample_id, (None, None))
                if ks is None:
                    raise ValueError(f"return of unknown sample {r.sample_id}")
                rewind_to = ks if rewind_to is None else min(rewind_to, ks)
        if rewind_to is not None and rewind_to < k:
            belief = fuse(priors[rewind_to].copy(), rewind_to)
            posts[rewind_to] = belief.copy()
            for j in range(rewind_to + 1, k):
                belief = advance(belief, j)
                priors[j] = belief.copy()
                belief = fuse(belief, j)
                posts[j] = belief.copy()
        belief = advance(belief, k)
        priors[k] = belief.copy()
        belief = fuse(belief, k)
        posts[k] = belief.copy()
        log.log_step(belief.t, maps.denormalize_x(belief.mean),
                     np.diag(maps.denormalize_cov(belief.cov)).copy(),
                     maps.denormalize_y(hooks.h(belief.mean)),
                     np.trace(belief.cov), 0)
    return log
