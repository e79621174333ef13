"""Normalization strategies applied at each batch-norm site.

Every strategy reduces to choosing a mean/variance pair ``(mu*, var*)`` that
is then plugged into ``gamma * (f - mu*) / sqrt(var* + eps) + beta``. The pair
is either per channel, shape (C,), or per sample and channel, shape (N, C).

Strategies: ``sbn`` (source statistics), ``tbn`` (test-batch statistics),
``alpha_bn`` (convex blend of the two), ``in`` (instance statistics),
``iabn`` (source statistics nudged toward instance statistics by
soft-shrinkage), ``dabn`` (``iabn``-style on high-diversity batches, blend on
low-diversity ones) and ``unmix`` (a K-component mixture of running
statistics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Tensor, batch_norm

STRATEGIES = ("sbn", "tbn", "alpha_bn", "in", "iabn", "dabn", "unmix")


@dataclass
class BNLayerState:
    mu_source: np.ndarray
    var_source: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        c = self.mu_source.shape
        for name in ("var_source", "gamma", "beta"):
            if getattr(self, name).shape != c:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {c}")
        if np.any(self.var_source < 0):
            raise ValueError("var_source must be non-negative")

    @property
    def channels(self) -> int:
        return self.mu_source.shape[0]


@dataclass(frozen=True)
class BatchStats:
    """Per-channel batch statistics and per-sample instance statistics."""

    mu_test: np.ndarray       # (C,)
    var_test: np.ndarray      # (C,)
    mu_instance: np.ndarray   # (N, C)
    var_instance: np.ndarray  # (N, C)
    L: int                    # spatial positions per instance, H*W

    @property
    def degenerate_instance(self) -> bool:
        return self.L == 1


@dataclass
class NormConfig:
    """Strategy selector plus every strategy parameter.

    ``alpha`` is the DABN adjustment weight on the current batch (0.2), while
    ``a`` is the source weight of plain alpha-BN.
    """

    strategy: str = "sbn"
    a: float = 0.5
    alpha: float = 0.2
    kappa: float = 4.0
    threshold_scale: str = "sqrt"  # "sqrt" (standard error) or "raw" (variance)
    psi_mode: str = "soft"         # "soft" shrinkage or the "literal" case list
    K: int = 16
    lambda0: float = 0.1
    B0: int = 64
    temperature: float = 0.07
    alpha_init: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown normalization strategy {self.strategy!r}; "
                             f"expected one of {', '.join(STRATEGIES)}")
        if self.threshold_scale not in ("sqrt", "raw"):
            raise ValueError(f"threshold_scale must be 'sqrt' or 'raw', got {self.threshold_scale!r}")
        if self.psi_mode not in ("soft", "literal"):
            raise ValueError(f"psi_mode must be 'soft' or 'literal', got {self.psi_mode!r}")


def compute_batch_stats(f: np.ndarray) -> BatchStats:
    """Biased batch and instance statistics of an (N, C, H, W) feature map."""
    if f.ndim != 4 or f.shape[0] < 1:
        raise ValueError(f"expected a non-empty (N, C, H, W) map, got shape {f.shape}")
    x = np.asarray(f, dtype=np.float64)
    mu_i = x.mean(axis=(2, 3))
    var_i = x.var(axis=(2, 3))
    mu_t = mu_i.mean(axis=0)
    # total variance = mean within-instance variance + variance of instance means
    var_t = var_i.mean(axis=0) + ((mu_i - mu_t) ** 2).mean(axis=0)
    return BatchStats(mu_t, var_t, mu_i, var_i, f.shape[2] * f.shape[3])


def alpha_bn_stats(state: BNLayerState, stats: BatchStats, a: float):
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"alpha-BN weight must lie in [0, 1], got {a}")
    mu = a * state.mu_source + (1.0 - a) * stats.mu_test
    var = a * state.var_source + (1.0 - a) * stats.var_test
    return mu, var


def sampling_variances(state: BNLayerState, L: int):
    """Variances of the sample mean and sample variance for sample size ``L``."""
    if L < 2:
        raise ValueError(f"sample size L must be >= 2, got {L}")
    var = np.asarray(state.var_source, dtype=np.float64)
    return var / L, 2.0 * var ** 2 / (L - 1)


def psi(x_minus_z, y_minus_z, threshold, high_diversity: bool, mode: str = "soft"):
    """Deviation applied to the source statistic.

    High diversity: soft-shrink ``x - z`` by ``threshold``. Low diversity: the
    batch deviation ``y - z``. ``mode="literal"`` is the three-case form
    ``d - k if d > k, 0 if d == k, d + k otherwise``, whose middle case is not symmetric.
    """
    if not high_diversity:
        return np.asarray(y_minus_z, dtype=np.float64)
    d = np.asarray(x_minus_z, dtype=np.float64)
    k = np.asarray(threshold, dtype=np.float64)
    if np.any(k < 0):
        raise ValueError("threshold must be non-negative")
    if mode == "literal":
        return np.where(d == k, 0.0, np.where(d > k, d - k, d + k))
    return np.sign(d) * np.maximum(np.abs(d) - k, 0.0)


def _thresholds(state: BNLayerState, L: int, cfg: NormConfig):
    s_mu, s_sigma = sampling_variances(state, L)
    if cfg.threshold_scale == "sqrt":
        s_mu, s_sigma = np.sqrt(s_mu), np.sqrt(s_sigma)
    return cfg.kappa * s_mu, cfg.kappa * s_sigma


def dabn_stats(state: BNLayerState, stats: BatchStats, high_diversity: bool, cfg: NormConfig):
    """DABN statistics; per-sample (N, C) on the high branch, (C,) on the low one."""
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {cfg.alpha}")
    if cfg.kappa <= 0:
        raise ValueError(f"kappa must be positive, got {cfg.kappa}")
    mu_s = np.asarray(state.mu_source, dtype=np.float64)
    var_s = np.asarray(state.var_source, dtype=np.float64)
    if not high_diversity:
        mu = mu_s + cfg.alpha * psi(None, stats.mu_test - mu_s, 0.0, False)
        var = var_s + cfg.alpha * psi(None, stats.var_test - var_s, 0.0, False)
        return mu, np.maximum(var, 0.0)
    k_mu, k_sigma = _thresholds(state, stats.L, cfg)
    mu = mu_s + cfg.alpha * psi(stats.mu_instance - mu_s, None, k_mu, True, cfg.psi_mode)
    var = var_s + cfg.alpha * psi(stats.var_instance - var_s, None, k_sigma, True, cfg.psi_mode)
    return mu, np.maximum(var, 0.0)


def iabn_stats(state: BNLayerState, stats: BatchStats, cfg: NormConfig):
    return dabn_stats(state, stats, True, cfg)


# ------------------------------------------------------------------ UnMix-TNS

@dataclass
class UnMixState:
    component_means: np.ndarray  # (K, C)
    component_vars: np.ndarray   # (K, C)
    momentum: float
    temperature: float = 0.07
    alpha_init: float = 0.5

    @property
    def K(self) -> int:
        return self.component_means.shape[0]


def mixture_moments(weights, means, variances):
    """Mean and variance of a finite mixture (moments along the first axis)."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
        raise ValueError(f"mixture weights must be non-negative and sum to 1, got sum {w.sum()}")
    mu_k = np.asarray(means, dtype=np.float64)
    var_k = np.asarray(variances, dtype=np.float64)
    wb = w.reshape(w.shape + (1,) * (mu_k.ndim - 1))
    mu = (wb * mu_k).sum(axis=0)
    var = (wb * var_k).sum(axis=0) + (wb * mu_k ** 2).sum(axis=0) - mu ** 2
    return mu, np.maximum(var, 0.0)


def momentum_rule(B: int, B0: int = 64, lambda0: float = 0.1) -> float:
    """Batch-size-robust momentum, ``1 - (1 - lambda0) ** (B / B0)``."""
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    # expm1/log1p keeps B == B0 exact: the naive form gives 0.09999999999999998
    return -math.expm1((B / B0) * math.log1p(-lambda0))


def unmix_init(state: BNLayerState, K: int, alpha_init: float, seed, momentum: float = 0.1,
               temperature: float = 0.07) -> UnMixState:
    """Draw K components whose mixture matches the source statistics in expectation.

    Component means are ``mu + zeta_k`` with ``zeta_k ~ N(0, eps^2)`` and
    ``eps = sqrt(alpha K / (K - 1)) * sigma``; component variances are
    ``(1 - alpha) * sigma^2``.
    """
    if K < 2:
        raise ValueError(f"UnMix needs K >= 2 components, got {K}")
    if not 0.0 < alpha_init < 1.0:
        raise ValueError(f"alpha_init must lie in (0, 1), got {alpha_init}")
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(np.asarray(state.var_source, dtype=np.float64))
    spread = math.sqrt(alpha_init * K / (K - 1)) * sigma
    means = state.mu_source[None, :] + spread[None, :] * rng.standard_normal((K, state.channels))
    variances = np.broadcast_to((1.0 - alpha_init) * sigma ** 2, (K, state.channels)).copy()
    return UnMixState(means, variances, momentum, temperature, alpha_init)


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    dots = a @ b.T
    denom = na @ nb.T
    out = np.zeros_like(dots)
    ok = denom > 0
    out[ok] = dots[ok] / denom[ok]
    return out


def unmix_stats(stats: BatchStats, um: UnMixState):
    """Per-sample mixture statistics and the updated component state."""
    sim = _cosine(stats.mu_instance, um.component_means)              # (N, K)
    z = sim / um.temperature
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p = (p / p.sum(axis=1, keepdims=True))[:, :, None]                 # (N, K, 1)
    hat_mean = (1 - p) * um.component_means[None] + p * stats.mu_instance[:, None, :]
    hat_var = (1 - p) * um.component_vars[None] + p * stats.var_instance[:, None, :]
    w = np.full(um.K, 1.0 / um.K)
    mu, var = mixture_moments(w, hat_mean.transpose(1, 0, 2), hat_var.transpose(1, 0, 2))
    new = replace(
        um,
        component_means=um.component_means + um.momentum * (hat_mean.mean(axis=0) - um.component_means),
        component_vars=um.component_vars + um.momentum * (hat_var.mean(axis=0) - um.component_vars),
    )
    return mu, var, new, p[:, :, 0]


def unmix_forward(f: Tensor, state: BNLayerState, um: UnMixState):
    stats = compute_batch_stats(f.data)
    mu, var, new, _ = unmix_stats(stats, um)
    out = batch_norm(f, mu, var, Tensor(state.gamma), Tensor(state.beta), eps=1e-6)
    return out, new


# ------------------------------------------------------------------ dispatch

@dataclass
class SiteContext:
    """Mutable per-site extras a strategy may need (UnMix components)."""

    unmix: UnMixState | None = None
    extras: dict = field(default_factory=dict)


def strategy_stats(state: BNLayerState, stats: BatchStats, high_diversity: bool, cfg: NormConfig,
                   ctx: SiteContext | None = None):
    """Resolve ``(mu*, var*, eps)`` for one site under ``cfg.strategy``."""
    s = cfg.strategy
    if s == "sbn":
        return state.mu_source, state.var_source, state.eps
    if s == "tbn":
        return stats.mu_test, stats.var_test, state.eps
    if s == "alpha_bn":
        return (*alpha_bn_stats(state, stats, cfg.a), state.eps)
    if s == "in":
        return stats.mu_instance, stats.var_instance, state.eps
    if s == "iabn":
        return (*iabn_stats(state, stats, cfg), state.eps)
    if s == "dabn":
        return (*dabn_stats(state, stats, high_diversity, cfg), state.eps)
    if s == "unmix":
        if ctx is None or ctx.unmix is None:
            raise ValueError("unmix strategy needs an initialised UnMixState")
        mu, var, ctx.unmix, _ = unmix_stats(stats, ctx.unmix)
        return mu, var, 1e-6
    raise ValueError(f"unknown normalization strategy {s!r}")


def normalize(f: Tensor, state: BNLayerState, stats: BatchStats | None, high_diversity: bool,
              cfg: NormConfig, gamma: Tensor | None = None, beta: Tensor | None = None,
              ctx: SiteContext | None = None) -> Tensor:
    """Normalize ``f`` with the configured strategy.

    ``gamma``/``beta`` may be graph parameters; by default the state's arrays
    are used as constants.
    """
    if f.shape[1] != state.channels:
        raise ValueError(f"feature map has {f.shape[1]} channels, layer state has {state.channels}")
    if stats is None:
        stats = compute_batch_stats(f.data)
    mu, var, eps = strategy_stats(state, stats, high_diversity, cfg, ctx)
    return batch_norm(f, mu, var,
                      gamma if gamma is not None else Tensor(state.gamma),
                      beta if beta is not None else Tensor(state.beta), eps=eps)
