"""Keep-rate states, dropout / DropBlock mask sampling and analytic keep probabilities.

Two kinds of drop site exist:

* :class:`KeepRateVector` -- independent Bernoulli keep rates, one per unit of a
  dense layer input.
* :class:`DropBlockParams` -- DropBlock on a (channels, u, v) feature map: seeds
  drawn at rate ``gamma`` over the valid seed region, each expanded to a
  ``b x b`` zeroed block. Seed ``(i, j)`` zeroes rows ``i..i+b-1`` and columns
  ``j..j+b-1``, i.e. it is the block centre offset by ``(b-1)/2``.
"""
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ._backend import get_kernels

THETA_MIN = 0.05


@dataclass(frozen=True)
class KeepRateVector:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size == 0:
            raise ValueError("keep-rate vector must be non-empty")
        if np.any(theta < THETA_MIN) or np.any(theta > 1.0):
            raise ValueError(f"keep rates must lie in [{THETA_MIN}, 1]")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def full(cls, width, value=1.0):
        return cls(np.full(width, float(value)))

    def clipped(self, theta):
        """New vector with ``theta`` projected onto [THETA_MIN, 1]."""
        return KeepRateVector(np.clip(theta, THETA_MIN, 1.0))

    def __len__(self):
        return self.theta.size


def _map_shape(t):
    if isinstance(t, (tuple, list)):
        u, v = (int(s) for s in t)
    else:
        u = v = int(t)
    return u, v


def dropblock_gamma(d, b, t):
    """Seed rate d/b^2 * uv / ((u-b+1)(v-b+1)); ``t`` is a side length or a (u, v) pair."""
    u, v = _map_shape(t)
    if b < 1 or b > min(u, v):
        raise ValueError(f"block size {b} must satisfy 1 <= b <= min feature size {min(u, v)}")
    return d / (b * b) * (u * v) / ((u - b + 1) * (v - b + 1))


@dataclass(frozen=True)
class DropBlockParams:
    """DropBlock setting for one feature map size. ``gamma`` is derived, never stored by hand."""

    d: float
    b: int
    t: tuple = field(default=None)
    gamma: float = field(init=False)

    def __post_init__(self):
        u, v = _map_shape(self.t)
        object.__setattr__(self, "t", (u, v))
        if not 0.0 <= self.d < 1.0:
            raise ValueError(f"drop rate d must lie in [0, 1), got {self.d}")
        if self.b < 1 or self.b % 2 == 0:
            raise ValueError(f"block size must be odd and positive, got {self.b}")
        object.__setattr__(self, "gamma", dropblock_gamma(self.d, self.b, (u, v)))

    @property
    def shape(self):
        return self.t

    @property
    def seed_shape(self):
        u, v = self.t
        return u - self.b + 1, v - self.b + 1

    def with_d(self, d):
        return replace(self, d=float(d))

    @property
    def gamma_per_d(self):
        """d(gamma)/d(d); gamma is linear in d."""
        u, v = self.t
        b = self.b
        return (u * v) / (b * b * (u - b + 1) * (v - b + 1))


def sample_dropout_mask(theta, rng, size=None):
    """Bernoulli(theta) mask; ``size`` prepends batch dimensions."""
    theta = theta.theta if isinstance(theta, KeepRateVector) else np.asarray(theta, dtype=np.float64)
    shape = theta.shape if size is None else tuple(np.atleast_1d(size)) + theta.shape
    return (rng.random(shape) < theta).astype(np.float64)


def sample_dropblock_mask(params, channels, rng, batch=None, backend=None):
    """Independent DropBlock mask per channel (and per example when ``batch`` is given)."""
    u, v = params.t
    su, sv = params.seed_shape
    lead = (channels,) if batch is None else (batch, channels)
    count = int(np.prod(lead))
    seeds = rng.random((count, su, sv)) < params.gamma
    mask = get_kernels(backend).dropblock_expand(seeds, params.b, u, v)
    return mask.reshape(lead + (u, v))


def _axis_cover(n, b):
    i = np.arange(n)
    return np.minimum(i, n - b) - np.maximum(0, i - b + 1) + 1


def cover_counts(b, t):
    """Number of valid seed positions whose block covers each unit."""
    u, v = _map_shape(t)
    return np.outer(_axis_cover(u, b), _axis_cover(v, b))


def keep_prob_matrix(params, warn=True):
    """Additive-union keep probabilities 1 - cover_count * gamma, floored at 0."""
    drop = cover_counts(params.b, params.t) * params.gamma
    if warn and drop.max() > 1.0:
        warnings.warn(
            f"cover_count*gamma reaches {drop.max():.3f} > 1; keep probabilities clamped at 0",
            RuntimeWarning,
            stacklevel=2,
        )
    return np.clip(1.0 - drop, 0.0, 1.0)


def keep_prob_matrix_grad_d(params):
    """Derivative of :func:`keep_prob_matrix` with respect to d (zero where clamped)."""
    cover = cover_counts(params.b, params.t)
    grad = -cover * params.gamma_per_d
    return np.where(cover * params.gamma < 1.0, grad, 0.0)


def exact_keep_prob_matrix(params):
    """Exact per-unit keep probability (1 - gamma) ** cover_count under independent seeds."""
    return (1.0 - params.gamma) ** cover_counts(params.b, params.t)


def keep_values(state):
    """Keep probabilities applied at a drop site, as an array broadcastable to its input."""
    if state is None:
        return None
    if isinstance(state, KeepRateVector):
        return state.theta
    if isinstance(state, DropBlockParams):
        return keep_prob_matrix(state)
    return np.asarray(state, dtype=np.float64)


def keep_norm(state):
    """Entrywise 2-norm of a keep-rate vector or keep-prob matrix; 1.0 when there is no drop site."""
    if state is None:
        return 1.0
    return float(math.sqrt(np.sum(np.square(keep_values(state)))))


def channel_keep_norms(state, channels):
    """Per-channel keep norms. DropBlock shares one keep-prob matrix across channels."""
    return np.full(channels, keep_norm(state))
