"""Procedural source task, corruption domains, and test-stream scenarios.

Images are oriented sinusoidal gratings: the class fixes the orientation and
the spatial-frequency band, everything else (phase, colour, background,
amplitude, pixel noise) is nuisance. Every random draw is keyed by a tuple
of integers so any sample can be regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

KINDS = ("identity", "gaussian_noise", "shot_noise", "impulse_noise", "defocus_blur",
         "motion_blur", "contrast", "brightness", "pixelate")
CORRUPTIONS = KINDS[1:]

# severity 1..5
LADDERS: dict[str, tuple] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot_noise": (60, 25, 12, 5, 3),
    "impulse_noise": (0.03, 0.06, 0.09, 0.17, 0.27),
    "defocus_blur": (0.5, 0.8, 1.1, 1.5, 2.0),
    "motion_blur": (3, 5, 7, 9, 11),
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),
    "brightness": (0.1, 0.2, 0.3, 0.4, 0.5),
    "pixelate": (2, 3, 4, 5, 6),
}

SCENARIOS = ("dynamic", "dynamic_s", "non_iid", "multi_non_iid")

_TRAIN, _TEST, _NOISE = 0, 1, 2


@dataclass(frozen=True)
class SourceTask:
    num_classes: int = 10
    image_shape: tuple[int, int, int] = (3, 32, 32)
    seed: int = 0

    @property
    def n_orient(self) -> int:
        return math.ceil(self.num_classes / 2)


@dataclass(frozen=True)
class Domain:
    kind: str = "identity"
    severity: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.kind == "identity":
            if self.severity != 0:
                raise ValueError("identity domain has severity 0 only")
        elif self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity for {self.kind} must be 1..5, got {self.severity}")

    @property
    def label(self) -> str:
        return self.kind if self.kind == "identity" else f"{self.kind}-{self.severity}"


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    domains: tuple[Domain, ...]
    batch_size: int = 64
    num_batches: int = 50
    delta: float = 0.1
    seed: int = 0
    run_length: int = 10

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {', '.join(SCENARIOS)}")
        if not self.domains:
            raise ValueError("scenario needs at least one domain")
        if self.kind == "dynamic" and len(self.domains) < 2:
            raise ValueError("dynamic scenario requires at least 2 domains")
        if self.kind in ("non_iid", "multi_non_iid") and self.delta <= 0:
            raise ValueError(f"Dirichlet delta must be positive, got {self.delta}")
        if self.batch_size < 1 or self.num_batches < 1 or self.run_length < 1:
            raise ValueError("batch_size, num_batches and run_length must be >= 1")
        if self.kind in ("dynamic", "dynamic_s", "multi_non_iid") and len(self.domains) > self.batch_size:
            raise ValueError(f"{len(self.domains)} domains cannot share a batch of {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "domains": [{"kind": d.kind, "severity": d.severity} for d in self.domains],
            "batch_size": self.batch_size,
            "num_batches": self.num_batches,
            "delta": self.delta,
            "seed": self.seed,
            "run_length": self.run_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        allowed = {"kind", "domains", "batch_size", "num_batches", "delta", "seed", "run_length"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
        if "kind" not in d or "domains" not in d:
            raise ValueError("scenario needs 'kind' and 'domains'")
        doms = []
        for item in d["domains"]:
            if isinstance(item, str):
                kind, _, sev = item.partition(":")
                doms.append(Domain(kind, int(sev or 0)))
            else:
                doms.append(Domain(item["kind"], int(item.get("severity", 0))))
        kw = {k: d[k] for k in allowed - {"kind", "domains"} if k in d}
        return cls(kind=d["kind"], domains=tuple(doms), **kw)


@dataclass
class StreamBatch:
    x: np.ndarray
    labels: np.ndarray
    domain_ids: np.ndarray
    t: int = 0


# ------------------------------------------------------------------ rendering

def render(task: SourceTask, labels: Sequence[int], keys: Sequence[tuple[int, ...]]) -> np.ndarray:
    """Render one image per (label, key); keys seed every nuisance draw."""
    c, h, w = task.image_shape
    n = len(labels)
    labels = np.asarray(labels)
    theta = np.empty(n)
    period = np.empty(n)
    phase = np.empty(n)
    amp = np.empty(n)
    bg = np.empty((n, c))
    gain = np.empty((n, c))
    noise = np.empty((n, c, h, w), dtype=np.float32)
    for i, key in enumerate(keys):
        r = np.random.default_rng(key)
        u = r.random(5 + 2 * c)
        theta[i] = math.pi * (labels[i] % task.n_orient) / task.n_orient + (u[0] - 0.5) * 0.12
        period[i] = (7.0 + 2.0 * u[1]) if labels[i] < task.n_orient else (3.6 + 0.8 * u[1])
        phase[i] = 2 * math.pi * u[2]
        amp[i] = 0.15 + 0.15 * u[3]
        bg[i] = 0.35 + 0.3 * u[4] + (u[5:5 + c] - 0.5) * 0.2
        gain[i] = 0.6 + 0.4 * u[5 + c:5 + 2 * c]
        noise[i] = r.standard_normal((c, h, w), dtype=np.float32) * 0.03
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    arg = (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None])
    wave = np.sin(2 * math.pi * arg / period[:, None, None] + phase[:, None, None])
    img = bg[:, :, None, None] + (amp[:, None] * gain)[:, :, None, None] * wave[:, None]
    return np.clip(img.astype(np.float32) + noise, 0.0, 1.0)


def gen_source(task: SourceTask, n: int, start: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Clean labelled samples ``start .. start+n-1``; labels cycle through the classes."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    ids = np.arange(start, start + n)
    labels = ids % task.num_classes
    return render(task, labels, [(task.seed, _TRAIN, int(i)) for i in ids]), labels.astype(np.int64)


# ---------------------------------------------------------------- corruption

def _rngs(seed, n):
    if isinstance(seed, (int, np.integer)):
        return None, np.random.default_rng(int(seed))
    seeds = list(seed)
    if len(seeds) != n:
        raise ValueError(f"{len(seeds)} seeds for {n} images")
    return [np.random.default_rng(s) for s in seeds], None


def _random_like(x, rngs, rng, draw):
    if rngs is None:
        return draw(rng, x.shape)
    return np.stack([draw(r, x.shape[1:]) for r in rngs])


def _pixelate(x: np.ndarray, block: int) -> np.ndarray:
    h, w = x.shape[-2:]
    rows = np.arange(0, h, block)
    cols = np.arange(0, w, block)
    sums = np.add.reduceat(np.add.reduceat(x, rows, axis=-2), cols, axis=-1)
    rh = np.diff(np.append(rows, h))
    cw = np.diff(np.append(cols, w))
    means = sums / (rh[:, None] * cw[None, :])
    return np.repeat(np.repeat(means, rh, axis=-2), cw, axis=-1)


def apply_corruption(x: np.ndarray, d: Domain, seed=0) -> np.ndarray:
    """Corrupt images in [0, 1]; output is clipped to [0, 1].

    ``x`` is (N, C, H, W) or a single (C, H, W). ``seed`` is either one int
    (a single generator for the whole array) or one seed per image, which
    makes the result independent of batch order.
    """
    if d.kind == "identity":
        return x
    single = x.ndim == 3
    xb = x[None] if single else x
    if single and not isinstance(seed, (int, np.integer)):
        seed = [seed]
    rngs, rng = _rngs(seed, xb.shape[0])
    p = LADDERS[d.kind][d.severity - 1]
    xf = xb.astype(np.float64)
    if d.kind == "gaussian_noise":
        out = xf + p * _random_like(xb, rngs, rng, lambda r, s: r.standard_normal(s))
    elif d.kind == "shot_noise":
        lam = np.clip(xf, 0, 1) * p
        if rngs is None:
            out = rng.poisson(lam) / p
        else:
            out = np.stack([r.poisson(l) for r, l in zip(rngs, lam)]) / p
    elif d.kind == "impulse_noise":
        u = _random_like(xb, rngs, rng, lambda r, s: r.random(s))
        out = np.where(u < p / 2, 0.0, np.where(u > 1 - p / 2, 1.0, xf))
    elif d.kind == "defocus_blur":
        out = ndimage.gaussian_filter(xf, sigma=(0, 0, p, p), mode="reflect")
    elif d.kind == "motion_blur":
        out = ndimage.uniform_filter1d(xf, size=p, axis=-1, mode="reflect")
    elif d.kind == "contrast":
        m = xf.mean(axis=(1, 2, 3), keepdims=True)
        out = (xf - m) * p + m
    elif d.kind == "brightness":
        out = xf + p
    elif d.kind == "pixelate":
        out = _pixelate(xf, p)
    else:  # pragma: no cover - guarded by Domain
        raise ValueError(f"unknown corruption kind {d.kind!r}")
    out = np.clip(out, 0.0, 1.0).astype(x.dtype)
    return out[0] if single else out


# -------------------------------------------------------------------- streams

def dirichlet_schedule(num_slots: int, num_classes: int, delta: float, seed) -> np.ndarray:
    """Rows of class proportions drawn i.i.d. from Dirichlet(delta * 1)."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.full(num_classes, float(delta)), size=num_slots)
    # tiny concentrations can underflow every component of a row
    bad = ~np.isfinite(rows).all(axis=1) | (rows.sum(axis=1) == 0)
    for i in np.flatnonzero(bad):
        rows[i] = np.eye(num_classes)[rng.integers(num_classes)]
    return rows / rows.sum(axis=1, keepdims=True)


def allocate(proportions: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder integer counts summing to ``total``."""
    raw = proportions * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _slot_domains(m: int, batch_size: int) -> np.ndarray:
    return np.arange(batch_size) % m


def _batch_plan(spec: ScenarioSpec, num_classes: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (labels, domain ids) per batch."""
    rng = np.random.default_rng([spec.seed, 17])
    m, b = len(spec.domains), spec.batch_size
    if spec.kind in ("non_iid", "multi_non_iid"):
        rows = dirichlet_schedule(spec.num_batches, num_classes, spec.delta, [spec.seed, 23])
        segments = np.array_split(np.arange(spec.num_batches), m)
        segment_of = np.empty(spec.num_batches, dtype=int)
        for k, seg in enumerate(segments):
            segment_of[seg] = k
    for t in range(spec.num_batches):
        if spec.kind in ("non_iid", "multi_non_iid"):
            labels = rng.permutation(np.repeat(np.arange(num_classes), allocate(rows[t], b)))
        else:
            labels = rng.integers(0, num_classes, size=b)
        if spec.kind == "dynamic" or spec.kind == "multi_non_iid":
            doms = _slot_domains(m, b)
        elif spec.kind == "dynamic_s":
            run = t // spec.run_length
            doms = np.full(b, (run // 2) % m) if run % 2 == 0 else _slot_domains(m, b)
        else:
            doms = np.full(b, segment_of[t])
        yield labels.astype(np.int64), doms.astype(np.int64)


def build_stream(spec: ScenarioSpec, task: SourceTask) -> Iterator[StreamBatch]:
    """Deterministic test stream for ``spec``; one :class:`StreamBatch` per step."""
    for t, (labels, doms) in enumerate(_batch_plan(spec, task.num_classes)):
        keys = [(task.seed, _TEST, spec.seed, t, j) for j in range(len(labels))]
        x = render(task, labels, keys)
        for k, d in enumerate(spec.domains):
            idx = np.flatnonzero(doms == k)
            if idx.size and d.kind != "identity":
                x[idx] = apply_corruption(x[idx], d, [(task.seed, _NOISE, spec.seed, t, int(j)) for j in idx])
        yield StreamBatch(x, labels, doms, t)
