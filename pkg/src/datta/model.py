"""A tiny conv net: [conv -> BN -> ReLU] x depth -> global average pool -> affine."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .normalizers import BNLayerState

# (site index, feature map, gamma, beta) -> normalized map
NormFn = Callable[[int, T.Tensor, T.Tensor, T.Tensor], T.Tensor]


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 3
    image_size: int = 32
    channels: tuple[int, ...] = (16, 32, 32)
    kernels: tuple[int, ...] = (5, 3, 3)
    strides: tuple[int, ...] = (1, 2, 2)
    num_classes: int = 10

    def __post_init__(self):
        if not len(self.channels) == len(self.kernels) == len(self.strides) >= 1:
            raise ValueError("channels, kernels and strides must have equal non-zero length")
        size = self.image_size
        for k, s in zip(self.kernels, self.strides):
            if k > size:
                raise ValueError(f"kernel {k} larger than feature map {size}")
            size = (size - k) // s + 1

    def site_sizes(self) -> list[int]:
        out, size = [], self.image_size
        for k, s in zip(self.kernels, self.strides):
            size = (size - k) // s + 1
            out.append(size)
        return out

    def layers(self) -> list[tuple[str, str]]:
        out = []
        for i in range(len(self.channels)):
            out += [("conv", f"conv{i}"), ("bn", f"bn{i}"), ("relu", "")]
        return out + [("pool", ""), ("affine", "head")]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class Model:
    def __init__(self, spec: ModelSpec, kernels: list[np.ndarray], bn: list[BNLayerState],
                 head_w: np.ndarray, head_b: np.ndarray):
        self.spec = spec
        self.kernels = kernels
        self.bn = bn
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "Model":
        rng = np.random.default_rng(seed)
        kernels, bn = [], []
        cin = spec.in_channels
        for cout, k in zip(spec.channels, spec.kernels):
            fan_in = cin * k * k
            kernels.append((rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)).astype(np.float32))
            bn.append(BNLayerState(np.zeros(cout, np.float32), np.ones(cout, np.float32),
                                   np.ones(cout, np.float32), np.zeros(cout, np.float32)))
            cin = cout
        head_w = (rng.standard_normal((cin, spec.num_classes)) * np.sqrt(1.0 / cin)).astype(np.float32)
        return cls(spec, kernels, bn, head_w, np.zeros(spec.num_classes, np.float32))

    @property
    def num_sites(self) -> int:
        return len(self.bn)

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    # ------------------------------------------------------------- parameters

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, s) in enumerate(zip(self.kernels, self.bn)):
            out[f"conv{i}.kernel"] = k
            out[f"bn{i}.gamma"] = s.gamma
            out[f"bn{i}.beta"] = s.beta
            out[f"bn{i}.mu_source"] = s.mu_source
            out[f"bn{i}.var_source"] = s.var_source
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()

    def affine_params(self, sites) -> dict[str, T.Tensor]:
        out = {}
        for i in sites:
            out[f"bn{i}.gamma"] = T.Tensor(self.bn[i].gamma, name=f"bn{i}.gamma")
            out[f"bn{i}.beta"] = T.Tensor(self.bn[i].beta, name=f"bn{i}.beta")
        return out

    def load_affine(self, params: dict[str, T.Tensor]) -> None:
        for name, t in params.items():
            site, field = name.split(".")
            setattr(self.bn[int(site[2:])], field, t.data.astype(np.float32))

    # ---------------------------------------------------------------- forward

    def stem(self, x: np.ndarray) -> np.ndarray:
        """Pre-normalization feature map at the first BN site (no recording)."""
        return T.conv2d(T.Tensor(x), T.Tensor(self.kernels[0]), self.spec.strides[0]).data

    def head(self, f0: np.ndarray, norm: NormFn, graph: T.Graph | None = None,
             trainable_sites=()) -> T.Tensor:
        """Finish the forward pass from the first-site feature map ``f0``."""
        def leaf(name, value, trainable=False):
            return graph.param(name, value, trainable) if graph is not None else T.Tensor(value)

        h = T.Tensor(f0)
        for i in range(self.num_sites):
            if i > 0:
                h = T.conv2d(h, leaf(f"conv{i}.kernel", self.kernels[i]), self.spec.strides[i])
            gamma = leaf(f"bn{i}.gamma", self.bn[i].gamma, i in trainable_sites)
            beta = leaf(f"bn{i}.beta", self.bn[i].beta, i in trainable_sites)
            h = T.relu(norm(i, h, gamma, beta))
        h = T.global_avg_pool(h)
        return T.affine(h, leaf("head.weight", self.head_w), leaf("head.bias", self.head_b))

    def forward(self, x: np.ndarray, norm: NormFn, graph: T.Graph | None = None,
                trainable_sites=()) -> T.Tensor:
        return self.head(self.stem(x), norm, graph, trainable_sites)

    def train_forward(self, x: np.ndarray, graph: T.Graph):
        """Training-mode forward with every parameter trainable.

        Returns logits and the per-site batch (mean, var) for running statistics.
        """
        h = T.Tensor(x)
        batch_stats = []
        for i in range(self.num_sites):
            h = T.conv2d(h, graph.param(f"conv{i}.kernel", self.kernels[i]), self.spec.strides[i])
            h, m, v = T.batch_norm_train(h, graph.param(f"bn{i}.gamma", self.bn[i].gamma),
                                         graph.param(f"bn{i}.beta", self.bn[i].beta), self.bn[i].eps)
            batch_stats.append((m, v))
            h = T.relu(h)
        h = T.global_avg_pool(h)
        logits = T.affine(h, graph.param("head.weight", self.head_w), graph.param("head.bias", self.head_b))
        return logits, batch_stats

    def set_trainable_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            arr = arr.astype(np.float32)
            if name.startswith("conv"):
                self.kernels[int(name[4:].split(".")[0])] = arr
            elif name.startswith("bn"):
                site, field = name.split(".")
                setattr(self.bn[int(site[2:])], field, arr)
            elif name == "head.weight":
                self.head_w = arr
            elif name == "head.bias":
                self.head_b = arr
            else:
                raise KeyError(name)
