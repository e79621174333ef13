"""Per-batch test-time adaptation: DATTA and the comparison baselines.

Every step does exactly one forward pass, reports predictions from it, and
only then (optionally) takes one SGD step on the BN affine parameters.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diversity import (DiversityCache, DiversityGate, activation_vectors, discrepancy_angles,
                        diversity_score)
from .model import Model
from .normalizers import (BatchStats, NormConfig, SiteContext, compute_batch_stats, momentum_rule,
                          normalize, unmix_init)

METHODS = ("source", "bn_stats", "tent", "datta", "iabn_only", "unmix")


@dataclass
class AdaptationConfig:
    method: str = "datta"
    alpha: float = 0.2
    kappa: float = 4.0
    lr: float = 1e-4
    lambda_pct: float = 50.0
    t_init: int = 16
    update_fraction: float = 100.0
    bn_stats_a: float = 0.5
    literal_indicator: bool = False
    force_gate: str | None = None  # None, "high" or "low"
    granularity: str = "per_sample"
    window: int | None = None
    threshold_scale: str = "sqrt"
    psi_mode: str = "soft"
    K: int = 16
    lambda0: float = 0.1
    B0: int = 64
    temperature: float = 0.07
    alpha_init: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if not 0.0 < self.update_fraction <= 100.0:
            raise ValueError(f"update_fraction must lie in (0, 100], got {self.update_fraction}")
        if self.force_gate not in (None, "high", "low"):
            raise ValueError(f"force_gate must be high, low or unset, got {self.force_gate!r}")
        if self.granularity not in ("per_sample", "per_activation"):
            raise ValueError(f"granularity must be per_sample or per_activation, got {self.granularity!r}")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        # fail early on bad strategy parameters
        self.norm("dabn")

    def norm(self, strategy: str) -> NormConfig:
        return NormConfig(strategy=strategy, a=self.bn_stats_a, alpha=self.alpha, kappa=self.kappa,
                          threshold_scale=self.threshold_scale, psi_mode=self.psi_mode, K=self.K,
                          lambda0=self.lambda0, B0=self.B0, temperature=self.temperature,
                          alpha_init=self.alpha_init)

    def eligible_sites(self, num_sites: int) -> tuple[int, ...]:
        return tuple(range(math.ceil(self.update_fraction / 100.0 * num_sites)))


@dataclass
class StepOutcome:
    predictions: np.ndarray
    gate: DiversityGate | None
    did_backward: bool
    loss: float | None
    elapsed: float
    logits: np.ndarray = field(repr=False, default=None)


# ------------------------------------------------------------------ helpers

def _site_norm(model: Model, cfg: NormConfig, high: bool, first_stats: BatchStats | None = None,
               contexts: list[SiteContext] | None = None):
    def norm(i, f, gamma, beta):
        stats = first_stats if i == 0 and first_stats is not None else None
        ctx = contexts[i] if contexts is not None else None
        return normalize(f, model.bn[i], stats, high, cfg, gamma, beta, ctx)
    return norm


def diversity_of(model: Model, f0: np.ndarray, stats0: BatchStats, granularity: str = "per_sample") -> float:
    """Diversity score of a batch from its first-site feature map."""
    st = model.bn[0]
    feats = stats0.mu_instance if granularity == "per_sample" else activation_vectors(f0)
    return diversity_score(discrepancy_angles(feats, st.mu_source, stats0.mu_test))


def _forced(gate: DiversityGate, force: str | None) -> DiversityGate:
    if force is None or gate.in_cold_start:
        return gate
    return DiversityGate(gate.score, gate.threshold, force == "high", False)


def entropy_update(model: Model, f0: np.ndarray, norm, sites, lr: float):
    """Forward from ``f0`` on a graph, entropy backward, SGD on the BN affine params of ``sites``.

    Returns the pre-update logits and the loss.
    """
    with T.Graph() as g:
        logits = model.head(f0, norm, g, sites)
        loss = T.softmax_entropy(logits)
    grads = T.backward(g, loss)
    params = {name: g.params[name] for name in grads}
    model.load_affine(T.sgd_update(params, grads, lr))
    return logits.data, loss.item()


def _outcome(logits, gate, did_backward, loss, t0):
    return StepOutcome(logits.argmax(axis=1), gate, did_backward, loss, time.perf_counter() - t0, logits)


# -------------------------------------------------------------------- steps

def datta_step(model: Model, batch: np.ndarray, cache: DiversityCache, cfg: AdaptationConfig) -> StepOutcome:
    t0 = time.perf_counter()
    f0 = model.stem(batch)
    stats0 = compute_batch_stats(f0)
    gate = _forced(cache.update(diversity_of(model, f0, stats0, cfg.granularity)), cfg.force_gate)
    norm = _site_norm(model, cfg.norm("dabn"), gate.is_high, stats0)
    if cfg.literal_indicator:
        update = not gate.in_cold_start and gate.score > gate.threshold
    else:
        update = not gate.in_cold_start and not gate.is_high
    if update:
        logits, loss = entropy_update(model, f0, norm, cfg.eligible_sites(model.num_sites), cfg.lr)
        return _outcome(logits, gate, True, loss, t0)
    return _outcome(model.head(f0, norm).data, gate, False, None, t0)


def tent_step(model: Model, batch: np.ndarray, cfg: AdaptationConfig) -> StepOutcome:
    t0 = time.perf_counter()
    f0 = model.stem(batch)
    norm = _site_norm(model, cfg.norm("tbn"), True)
    logits, loss = entropy_update(model, f0, norm, tuple(range(model.num_sites)), cfg.lr)
    return _outcome(logits, None, True, loss, t0)


def _forward_only(model: Model, batch: np.ndarray, ncfg: NormConfig, contexts=None) -> StepOutcome:
    t0 = time.perf_counter()
    logits = model.forward(batch, _site_norm(model, ncfg, True, contexts=contexts)).data
    return _outcome(logits, None, False, None, t0)


def bn_stats_step(model: Model, batch: np.ndarray, cfg: AdaptationConfig) -> StepOutcome:
    return _forward_only(model, batch, cfg.norm("alpha_bn"))


def source_step(model: Model, batch: np.ndarray) -> StepOutcome:
    return _forward_only(model, batch, NormConfig("sbn"))


class Session:
    """One adaptation run: owns its model, diversity cache, and strategy state."""

    def __init__(self, model: Model, cfg: AdaptationConfig):
        self.model = model
        self.cfg = cfg
        self.cache = DiversityCache(cfg.lambda_pct, cfg.t_init, cfg.window)
        self.contexts = None
        self.batches_seen = 0

    def _unmix_contexts(self, batch_size: int):
        mom = momentum_rule(batch_size, self.cfg.B0, self.cfg.lambda0)
        return [SiteContext(unmix_init(st, self.cfg.K, self.cfg.alpha_init, [self.cfg.seed, i], mom,
                                       self.cfg.temperature))
                for i, st in enumerate(self.model.bn)]

    def step(self, batch: np.ndarray) -> StepOutcome:
        m, cfg = self.cfg.method, self.cfg
        self.batches_seen += 1
        if m == "datta":
            return datta_step(self.model, batch, self.cache, cfg)
        if m == "tent":
            return tent_step(self.model, batch, cfg)
        if m == "bn_stats":
            return bn_stats_step(self.model, batch, cfg)
        if m == "source":
            return source_step(self.model, batch)
        if m == "iabn_only":
            return _forward_only(self.model, batch, cfg.norm("iabn"))
        if m == "unmix":
            if self.contexts is None:
                self.contexts = self._unmix_contexts(len(batch))
            return _forward_only(self.model, batch, cfg.norm("unmix"), self.contexts)
        raise ValueError(f"unknown method {m!r}")

    def observe(self, batch: np.ndarray) -> DiversityGate:
        """Diversity bookkeeping for methods that do not gate on it (not timed)."""
        f0 = self.model.stem(batch)
        return self.cache.update(diversity_of(self.model, f0, compute_batch_stats(f0), self.cfg.granularity))

