"""Per-channel feature statistics and the dynamic mixing weight.

A BN layer under adaptation carries three statistic pairs: the frozen
training-time pair, the pair measured on the incoming frame, and the
interpolation between them that normalization actually uses.  The
mixing weight beta grows with the symmetric KL divergence between the
frame's statistics and the previous frame's interpolated ones, then is
smoothed by an exponential moving average, so the network leans on
frame statistics exactly when the input distribution has moved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, channel_moments
from .errors import NumericError, ShapeError

SIGMA_FLOOR = 1e-5

# raw mixing weight is contractually < 1; cap it where float64 would round
# 1 - e^{-gamma d} up to exactly 1.0 (gamma d around 37 suffices)
BETA_T_MAX = float(np.nextafter(1.0, 0.0))


@dataclass
class ChannelStats:
    """Per-channel mean and standard deviation, float64."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ShapeError(f"channel stats need matching 1-d arrays, "
                             f"got {self.mu.shape} and {self.sigma.shape}")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma))):
            raise NumericError("channel stats must be finite")
        # the floor is enforced, not validated: float32 round trips land a hair
        # below 1e-5 and must not be rejected
        self.sigma = np.maximum(self.sigma, SIGMA_FLOOR)

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    def copy(self) -> "ChannelStats":
        return ChannelStats(self.mu.copy(), self.sigma.copy())


def batch_stats(features) -> ChannelStats:
    """Per-channel mean and population std over the N, H, W positions of NCHW features.

    Degenerate (constant) channels get the sigma floor instead of zero.
    """
    x = features.data if isinstance(features, Tensor) else np.asarray(features)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW features, got shape {x.shape}")
    mu, sigma = channel_moments(x)
    return ChannelStats(mu, np.maximum(sigma, SIGMA_FLOOR))


def sym_kl(a: ChannelStats, b: ChannelStats) -> float:
    """Channel-averaged symmetric KL between per-channel Gaussians.

    Closed form per direction:
    KL(N(m1,s1) || N(m2,s2)) = ln(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2.
    """
    if a.channels != b.channels:
        raise ShapeError(f"channel counts differ: {a.channels} vs {b.channels}")
    v1 = a.sigma ** 2
    v2 = b.sigma ** 2
    dm2 = (a.mu - b.mu) ** 2
    kl_ab = np.log(b.sigma / a.sigma) + (v1 + dm2) / (2.0 * v2) - 0.5
    kl_ba = np.log(a.sigma / b.sigma) + (v2 + dm2) / (2.0 * v1) - 0.5
    return float(np.mean(kl_ab + kl_ba))


@dataclass
class BNAdaptState:
    """Adaptation state of one BN layer: frozen stats, last interpolated stats, beta."""

    source: ChannelStats
    current: ChannelStats = None
    beta: float = 0.0
    gamma_hp: float = 0.1
    alpha_hp: float = 0.005
    last_beta_t: float = field(default=0.0, repr=False)  # raw pre-EMA value, for traces

    def __post_init__(self):
        if self.current is None:
            self.current = self.source.copy()

    def reset(self) -> None:
        self.current = self.source.copy()
        self.beta = 0.0
        self.last_beta_t = 0.0


def beta_step(state: BNAdaptState, batch: ChannelStats) -> float:
    """Advance beta from the divergence between the frame's stats and the last
    interpolated stats, then smooth it; returns the new smoothed beta."""
    d = sym_kl(state.current, batch)
    beta_t = -np.expm1(-state.gamma_hp * d)  # 1 - e^{-gamma d}, accurate near 0
    beta_t = min(float(beta_t), BETA_T_MAX)
    state.last_beta_t = float(beta_t)
    state.beta = (1.0 - state.alpha_hp) * state.beta + state.alpha_hp * float(beta_t)
    return state.beta


def interpolate_stats(state: BNAdaptState, batch: ChannelStats) -> ChannelStats:
    """Lerp source and frame statistics by the current beta; the result is
    stored as the state's reference for the next frame's divergence."""
    b = state.beta
    if b == 0.0:
        mixed = state.source.copy()
    elif b == 1.0:
        mixed = batch.copy()
    else:
        mixed = ChannelStats((1.0 - b) * state.source.mu + b * batch.mu,
                             (1.0 - b) * state.source.sigma + b * batch.sigma)
    state.current = mixed
    return mixed
