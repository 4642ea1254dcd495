"""Continuous-discrete extended Kalman filter core.

All filtering runs in normalized coordinates: states, outputs and input are
scaled by constant diagonal maps, and the tuning matrices Q, R, P0 are given
in the scaled space. The measurement update uses the Joseph form throughout;
the same update path serves the linear baseline filters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import odeengine
from .odeengine import DivergenceError, symmetrize

#: normalized clipping floor for state priors
CLIP_EPS = 1e-3

#: condition-number ceiling of the innovation covariance
S_COND_CEILING = 1e12


@dataclass
class GaussianBelief:
    """State mean and error covariance at a time stamp (normalized)."""

    t: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        asym = np.max(np.abs(self.cov - self.cov.T)) if self.cov.size else 0.0
        if asym > 1e-10:
            raise ValueError(f"covariance asymmetry {asym:.2e} exceeds 1e-10")

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.t, self.mean.copy(), self.cov.copy())


@dataclass(frozen=True)
class NormalizationMaps:
    """Diagonal scalings for states, outputs and input."""

    T_x: np.ndarray
    T_y: np.ndarray
    T_u: float

    def __post_init__(self):
        object.__setattr__(self, "T_x", np.asarray(self.T_x, dtype=float))
        object.__setattr__(self, "T_y", np.asarray(self.T_y, dtype=float))
        if np.any(self.T_x <= 0.0) or np.any(self.T_y <= 0.0) or self.T_u <= 0.0:
            raise ValueError("normalization constants must be positive")

    @classmethod
    def default(cls) -> "NormalizationMaps":
        with resources.files("mrkf.data").joinpath("normalization.json").open() as fh:
            data = json.load(fh)
        return cls(T_x=np.array(data["T_x"]), T_y=np.array(data["T_y"]),
                   T_u=float(data["T_u"]))

    @classmethod
    def identity(cls, n_x: int, n_y: int) -> "NormalizationMaps":
        return cls(T_x=np.ones(n_x), T_y=np.ones(n_y), T_u=1.0)

    # vectors
    def normalize_x(self, x):
        return np.asarray(x) / self.T_x

    def denormalize_x(self, x):
        return np.asarray(x) * self.T_x

    def normalize_y(self, y):
        return np.asarray(y) / self.T_y

    def denormalize_y(self, y):
        return np.asarray(y) * self.T_y

    def normalize_u(self, u):
        return u / self.T_u

    def denormalize_u(self, u):
        return u * self.T_u

    # covariances
    def denormalize_cov(self, P):
        return self.T_x[:, None] * P * self.T_x[None, :]

    def normalize_cov(self, P):
        return P / (self.T_x[:, None] * self.T_x[None, :])


@dataclass(frozen=True)
class NoiseConfig:
    """Filter tuning: Q spectral densities (normalized), measurement-noise
    amplification k_R on the nominal signal variances, and initial P0."""

    Q_diag: np.ndarray
    k_R: float = 1.0
    R_diag_base: np.ndarray | None = None   # physical units (sigma^2)
    P0_diag: np.ndarray | None = None       # normalized; defaults to ones

    def __post_init__(self):
        object.__setattr__(self, "Q_diag", np.asarray(self.Q_diag, dtype=float))
        if np.any(self.Q_diag < 0.0):
            raise ValueError("Q diagonal must be nonnegative")
        if self.k_R <= 0.0:
            raise ValueError("k_R must be positive")
        if self.R_diag_base is not None:
            object.__setattr__(self, "R_diag_base",
                               np.asarray(self.R_diag_base, dtype=float))
        if self.P0_diag is not None:
            object.__setattr__(self, "P0_diag",
                               np.asarray(self.P0_diag, dtype=float))
            if np.any(self.P0_diag < 0.0):
                raise ValueError("P0 diagonal must be nonnegative")

    @classmethod
    def default(cls, n_states: int = 14) -> "NoiseConfig":
        with resources.files("mrkf.data").joinpath("measurement.json").open() as fh:
            meas = json.load(fh)
        sigma = np.array(meas["sigma"])
        return cls(Q_diag=np.full(n_states, 1e-2), k_R=1.0,
                   R_diag_base=sigma ** 2)

    def r_diag_normalized(self, maps: NormalizationMaps) -> np.ndarray:
        """Filter measurement covariance diagonal in normalized outputs."""
        if self.R_diag_base is None:
            raise ValueError("R_diag_base not configured")
        return self.k_R * self.R_diag_base / maps.T_y ** 2

    def p0(self, n_states: int) -> np.ndarray:
        d = self.P0_diag if self.P0_diag is not None else np.ones(n_states)
        return np.diag(d)


@dataclass(frozen=True)
class ModelHooks:
    """Model callbacks in the filter's (normalized) coordinates."""

    n_states: int
    n_outputs: int
    f: object      # f(x, u) -> dx/dt
    F: object      # state Jacobian
    h: object      # h(x) -> y
    H: object      # output Jacobian


def normalized_hooks(model, maps: NormalizationMaps) -> ModelHooks:
    """Wrap an absolute-coordinate model into normalized-space hooks.

    ``u`` passed to the hooks stays in absolute units (the feed schedule is
    shared with the truth simulation); states and outputs are scaled.
    """
    Tx, Ty = maps.T_x, maps.T_y
    inv_Tx, inv_Ty = 1.0 / Tx, 1.0 / Ty

    def f(xn, u):
        return inv_Tx * model.rhs(Tx * xn, u)

    def F(xn, u):
        return inv_Tx[:, None] * model.jacobian_rhs(Tx * xn, u) * Tx[None, :]

    def h(xn):
        return inv_Ty * model.outputs(Tx * xn)

    def H(xn):
        return inv_Ty[:, None] * model.jacobian_outputs(Tx * xn) * Tx[None, :]

    return ModelHooks(n_states=model.n_states, n_outputs=model.n_outputs,
                      f=f, F=F, h=h, H=H)


# ---------------------------------------------------------------------------
# filter steps
# ---------------------------------------------------------------------------

def clip_prior(belief: GaussianBelief, eps: float = CLIP_EPS,
               n_online: int | None = None) -> GaussianBelief:
    """Replace mean components below ``eps`` by ``eps`` (covariance untouched).

    For augmented beliefs only the leading ``n_online`` entries are clipped,
    so stored sample-state blocks stay bit-identical.
    """
    mean = belief.mean.copy()
    stop = len(mean) if n_online is None else n_online
    mean[:stop] = np.maximum(mean[:stop], eps)
    return GaussianBelief(belief.t, mean, belief.cov)


def time_update(belief: GaussianBelief, hooks: ModelHooks,
                intervals, Q: np.ndarray, t_next: float,
                rtol: float = 1e-4, atol: float = 1e-7) -> GaussianBelief:
    """Propagate mean and covariance to ``t_next`` (a priori belief)."""
    if t_next <= belief.t:
        raise ValueError("t_next must be greater than belief.t")
    x1, P1 = odeengine.propagate_joint(
        hooks.f, hooks.F, Q, belief.mean, belief.cov, intervals,
        rtol=rtol, atol=atol)
    return GaussianBelief(t_next, x1, P1)


def reduce_outputs(available: np.ndarray, y: np.ndarray, h_pred: np.ndarray,
                   H: np.ndarray, R_diag: np.ndarray):
    """Drop rows (and R entries) of unavailable measurement signals."""
    available = np.asarray(available, dtype=bool)
    if not available.any():
        raise ValueError("no measurement signal available")
    idx = np.flatnonzero(available)
    return y[idx], h_pred[idx], H[idx, :], R_diag[idx]


def joseph_update(mean: np.ndarray, cov: np.ndarray, innovation: np.ndarray,
                  H: np.ndarray, R: np.ndarray, gain_mask: np.ndarray | None = None):
    """Joseph-form measurement update shared by all filters.

    Returns ``(mean, cov, info)`` where ``info`` carries the innovation,
    the innovation covariance S, the gain and the NIS value. ``gain_mask``
    (an indicator matrix) premultiplies the Kalman gain so that masked
    state blocks are left untouched by the update.
    """
    n = mean.size
    S = symmetrize(H @ cov @ H.T + R)
    try:
        chol = cho_factor(S)
    except np.linalg.LinAlgError as err:
        raise DivergenceError(f"innovation covariance not SPD: {err}") from err
    diag = np.diag(S)
    if np.any(diag <= 0.0) or not np.all(np.isfinite(diag)):
        raise DivergenceError("innovation covariance degenerate")
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > S_COND_CEILING:
        raise DivergenceError(f"innovation covariance condition {cond:.2e}")

    K = cho_solve(chol, H @ cov).T           # P H^T S^-1
    if gain_mask is not None:
        K = gain_mask @ K
    mean_post = mean + K @ innovation
    IKH = np.eye(n) - K @ H
    cov_post = symmetrize(IKH @ cov @ IKH.T + K @ (R @ K.T))
    nis = float(innovation @ cho_solve(chol, innovation))
    info = {"innovation": innovation, "S": S, "K": K, "nis": nis,
            "q_av": len(innovation)}
    return mean_post, cov_post, info


def measurement_update(prior: GaussianBelief, y: np.ndarray,
                       hooks: ModelHooks, R_diag: np.ndarray,
                       available: np.ndarray | None = None):
    """EKF measurement update with optional partial-output reduction."""
    h_pred = hooks.h(prior.mean)
    H = hooks.H(prior.mean)
    if available is not None:
        y, h_pred, H, R_diag = reduce_outputs(available, y, h_pred, H, R_diag)
    mean, cov, info = joseph_update(prior.mean, prior.cov, y - h_pred,
                                    H, np.diag(R_diag))
    return GaussianBelief(prior.t, mean, cov), info
