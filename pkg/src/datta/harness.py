"""Source training, checkpoints, stream replay and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adaptation import AdaptationConfig, Session
from .datagen import ScenarioSpec, SourceTask, build_stream, gen_source
from .model import Model, ModelSpec
from .normalizers import BNLayerState

log = logging.getLogger(__name__)

MAGIC = b"DATTACKPT1\n"
FORMAT_VERSION = 1
RECORD_FIELDS = ("t", "acc", "score", "threshold", "branch", "did_backward", "elapsed_ms", "domain_ids")

# held-out source samples live far past any training range
HELDOUT_START = 10_000_000


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    n_train: int = 6000
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    bn_momentum: float = 0.1
    n_heldout: int = 1000
    photometric: float = 0.5  # strength of random contrast/brightness jitter, 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.n_train < self.batch_size or self.batch_size < 2:
            raise ValueError("need epochs >= 1 and n_train >= batch_size >= 2")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or not 0 < self.bn_momentum <= 1:
            raise ValueError("lr must be positive, momentum in [0,1), bn_momentum in (0,1]")
        if not 0 <= self.photometric < 1:
            raise ValueError(f"photometric must lie in [0, 1), got {self.photometric}")


@dataclass
class Checkpoint:
    model: Model
    task: SourceTask
    heldout_acc: float = float("nan")
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------- training

def photometric_jitter(x: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Per-image contrast scaling about the image mean and a brightness offset, clipped to [0, 1]."""
    n = x.shape[0]
    c = rng.uniform(1.0 - strength, 1.0, size=(n, 1, 1, 1))
    b = rng.uniform(-strength / 2, strength / 2, size=(n, 1, 1, 1))
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip((x - mean) * c + mean + b, 0.0, 1.0).astype(np.float32)


def evaluate_source(model: Model, task: SourceTask, n: int = 1000, batch_size: int = 250) -> float:
    """Accuracy with source statistics on clean held-out samples."""
    from .adaptation import source_step
    correct = 0
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        x, y = gen_source(task, m, start=HELDOUT_START + start)
        correct += int((source_step(model, x).predictions == y).sum())
    return correct / n


def train_source(task: SourceTask, spec: ModelSpec, cfg: TrainConfig = TrainConfig()) -> Checkpoint:
    """Minibatch SGD with momentum on cross-entropy; BN running statistics become the source statistics."""
    if spec.num_classes != task.num_classes or spec.in_channels != task.image_shape[0] \
            or spec.image_size != task.image_shape[1]:
        raise ValueError("model spec does not match the task's image shape / class count")
    model = Model.init(spec, cfg.seed)
    x, y = gen_source(task, cfg.n_train)
    rng = np.random.default_rng([cfg.seed, 101])
    velocity: dict[str, np.ndarray] = {}
    first = [True] * model.num_sites
    for epoch in range(cfg.epochs):
        order = rng.permutation(cfg.n_train)
        losses = []
        for s in range(0, cfg.n_train - cfg.batch_size + 1, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            xb = x[idx] if cfg.photometric == 0 else photometric_jitter(x[idx], cfg.photometric, rng)
            with T.Graph() as g:
                logits, site_stats = model.train_forward(xb, g)
                loss = T.cross_entropy(logits, y[idx])
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss became {loss.item()} in epoch {epoch}")
            losses.append(loss.item())
            grads = T.backward(g, loss)
            new = {}
            for name, grad in grads.items():
                v = cfg.momentum * velocity.get(name, 0.0) + grad.data
                velocity[name] = v
                new[name] = g.params[name].data - cfg.lr * v
            model.set_trainable_arrays(new)
            for i, (mu, var) in enumerate(site_stats):
                st = model.bn[i]
                w = 1.0 if first[i] else cfg.bn_momentum
                first[i] = False
                st.mu_source = ((1 - w) * st.mu_source + w * mu).astype(np.float32)
                st.var_source = ((1 - w) * st.var_source + w * var).astype(np.float32)
        log.info("epoch %d mean loss %.4f", epoch, float(np.mean(losses)))
    acc = evaluate_source(model, task, cfg.n_heldout)
    return Checkpoint(model, task, acc, {"train": asdict(cfg)})


# ------------------------------------------------------------- checkpoints

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = ckpt.model.named_arrays()
    manifest = {
        "version": FORMAT_VERSION,
        "model": ckpt.model.spec.to_dict(),
        "task": {"num_classes": ckpt.task.num_classes, "image_shape": list(ckpt.task.image_shape),
                 "seed": ckpt.task.seed},
        "eps": [float(s.eps) for s in ckpt.model.bn],
        "heldout_acc": ckpt.heldout_acc,
        "meta": ckpt.meta,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(head)))
            fh.write(head)
            for arr in arrays.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror or e}") from e
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        manifest = json.loads(raw[off:off + n])
    except ValueError as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from e
    off += n
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * 4
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated at array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, "<f4", count=size // 4, offset=off).reshape(shape).astype(np.float32)
        off += size
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    try:
        spec = ModelSpec.from_dict(manifest["model"])
        task = SourceTask(manifest["task"]["num_classes"], tuple(manifest["task"]["image_shape"]),
                          manifest["task"]["seed"])
        n_sites = len(spec.channels)
        kernels = [arrays[f"conv{i}.kernel"] for i in range(n_sites)]
        bn = [BNLayerState(arrays[f"bn{i}.mu_source"], arrays[f"bn{i}.var_source"], arrays[f"bn{i}.gamma"],
                           arrays[f"bn{i}.beta"], manifest["eps"][i]) for i in range(n_sites)]
        model = Model(spec, kernels, bn, arrays["head.weight"], arrays["head.bias"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: inconsistent manifest ({e})") from e
    if any(arrays[k].shape != v.shape for k, v in model.named_arrays().items()):
        raise CheckpointError(f"{path}: array shapes do not match the layer list")
    return Checkpoint(model, task, manifest.get("heldout_acc", float("nan")), manifest.get("meta", {}))


# --------------------------------------------------------------- experiments

@dataclass
class ExperimentRecord:
    t: int
    acc: float
    score: float
    threshold: float
    branch: str
    did_backward: bool
    elapsed_ms: float
    domain_ids: list[int]


def check_compatible(ckpt: Checkpoint, spec: ScenarioSpec) -> None:
    ms = ckpt.model.spec
    if ms.num_classes != ckpt.task.num_classes or (ms.in_channels, ms.image_size, ms.image_size) \
            != tuple(ckpt.task.image_shape):
        raise CheckpointError("checkpoint model does not match its task's image shape / classes")


def run_experiment(ckpt: Checkpoint, spec: ScenarioSpec, cfg: AdaptationConfig,
                   timing: bool = False) -> tuple[list[ExperimentRecord], dict]:
    """Replay ``spec``'s stream through a fresh copy of the checkpoint model.

    Per-record ``elapsed_ms`` is only filled in when ``timing`` is set, so
    that record files stay byte-reproducible; the summary always carries the
    measured mean latency.
    """
    check_compatible(ckpt, spec)
    model = ckpt.model.clone()
    session = Session(model, cfg)
    gated = cfg.method == "datta"
    records, elapsed = [], []
    per_dom_correct = np.zeros(len(spec.domains))
    per_dom_total = np.zeros(len(spec.domains))
    losses = []
    before = {k: v.copy() for k, v in model.named_arrays().items()}
    for batch in build_stream(spec, ckpt.task):
        out = session.step(batch.x)
        gate = out.gate if gated else session.observe(batch.x)
        elapsed.append(out.elapsed)
        hit = out.predictions == batch.labels
        np.add.at(per_dom_correct, batch.domain_ids, hit)
        np.add.at(per_dom_total, batch.domain_ids, 1)
        if out.loss is not None:
            losses.append(out.loss)
        records.append(ExperimentRecord(
            t=batch.t, acc=int(hit.sum()) / len(hit), score=gate.score, threshold=gate.threshold,
            branch=gate.branch, did_backward=out.did_backward,
            elapsed_ms=round(out.elapsed * 1e3, 3) if timing else 0.0,
            domain_ids=sorted(set(int(d) for d in batch.domain_ids))))
    after = model.named_arrays()
    changed = sum(int(np.sum(after[k] != before[k])) for k in after)
    labels = [d.label for d in spec.domains]
    per_domain = {}
    for k, lab in enumerate(labels):
        if per_dom_total[k]:
            key = lab if lab not in per_domain else f"{lab}#{k}"
            per_domain[key] = float(per_dom_correct[k] / per_dom_total[k])
    summary = {
        "method": cfg.method,
        "scenario": spec.kind,
        "seed": spec.seed,
        "num_batches": len(records),
        "mean_acc": float(np.mean([r.acc for r in records])) if records else float("nan"),
        "mean_latency_ms": float(np.mean(elapsed) * 1e3) if elapsed else float("nan"),
        "backward_count": sum(r.did_backward for r in records),
        "low_branch_count": sum(r.branch == "low" for r in records),
        "mean_score": float(np.mean([r.score for r in records])) if records else float("nan"),
        "updated_values": changed,
        "mean_loss": float(np.mean(losses)) if losses else None,
        "per_domain_acc": per_domain,
    }
    return records, summary


# ------------------------------------------------------------------ reports

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ";".join(str(i) for i in v)
    return str(v)


def records_to_csv(records: list[ExperimentRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[ExperimentRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RECORD_FIELDS:
        raise ValueError("CSV header does not match the record columns")
    out = []
    for row in rows[1:]:
        d = dict(zip(RECORD_FIELDS, row))
        out.append(ExperimentRecord(
            t=int(d["t"]), acc=float(d["acc"]), score=float(d["score"]), threshold=float(d["threshold"]),
            branch=d["branch"], did_backward=d["did_backward"] == "1", elapsed_ms=float(d["elapsed_ms"]),
            domain_ids=[int(i) for i in d["domain_ids"].split(";")] if d["domain_ids"] else []))
    return out


def timeline_svg(records: list[ExperimentRecord], width: int = 640, height: int = 240) -> str:
    """Score and threshold per batch as two polylines; low-branch batches marked on the axis."""
    pad = 30
    pts = [(r.t, r.score, r.threshold, r.branch) for r in records]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if pts:
        ts = [p[0] for p in pts]
        vals = [v for p in pts for v in p[1:3] if math.isfinite(v)] or [0.0]
        t0, t1 = min(ts), max(ts) or 1
        lo, hi = min(vals), max(vals)
        span_t = (t1 - t0) or 1
        span_v = (hi - lo) or 1.0

        def xy(t, v):
            return (pad + (t - t0) / span_t * (width - 2 * pad),
                    height - pad - (v - lo) / span_v * (height - 2 * pad))

        for idx, colour in ((1, "#1f77b4"), (2, "#d62728")):
            line = " ".join("%.1f,%.1f" % xy(p[0], p[idx]) for p in pts if math.isfinite(p[idx]))
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{line}"/>')
        for p in pts:
            if p[3] == "low":
                x, _ = xy(p[0], lo)
                parts.append(f'<line x1="{x:.1f}" y1="{height - pad + 2}" x2="{x:.1f}" '
                             f'y2="{height - pad + 8}" stroke="#2ca02c"/>')
        parts.append(f'<text x="{pad}" y="16" font-size="12" font-family="sans-serif">'
                     f'score (blue), threshold (red), low-branch batches (green ticks)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(records: list[ExperimentRecord], path, summary: dict | None = None,
                 plots: bool = True) -> list[Path]:
    """Write ``<path>.csv``, ``<path>.json`` (if a summary is given) and ``<path>.svg``."""
    base = Path(path)
    outputs = [(base.with_suffix(".csv"), records_to_csv(records))]
    if summary is not None:
        outputs.append((base.with_suffix(".json"), json.dumps(summary, indent=2, sort_keys=True) + "\n"))
    if plots:
        outputs.append((base.with_suffix(".svg"), timeline_svg(records)))
    written = []
    for p, text in outputs:
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
        except OSError as e:
            raise OSError(f"cannot write report {p}: {e.strerror or e}") from e
        written.append(p)
    return written


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
