"""Backbone, regressor and residual manifold projector."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError
from .numerics import (
    AffineCache,
    ParamBlock,
    affine_backward,
    affine_forward,
    as_matrix,
    glorot_uniform,
)

CHECKPOINT_VERSION = 1


class Layer:
    def __init__(self, weight: ParamBlock, bias: ParamBlock, activation: str):
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(cls, name, rng, d_in, d_out, activation, zero=False):
        w = np.zeros((d_in, d_out)) if zero else glorot_uniform(rng, d_in, d_out)
        return cls(
            ParamBlock(f"{name}.weight", w),
            ParamBlock(f"{name}.bias", np.zeros((1, d_out))),
            activation,
        )

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def forward(self, x):
        return affine_forward(x, self.weight, self.bias, self.activation)

    def params(self) -> list[ParamBlock]:
        return [self.weight, self.bias]


class MLP:
    """A stack of affine layers that exposes every layer's output."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    @classmethod
    def init(cls, name: str, rng, widths: Sequence[int], final_activation="none",
             zero_last=False):
        layers = []
        n = len(widths) - 1
        for i in range(n):
            last = i == n - 1
            layers.append(Layer.init(
                f"{name}.{i}", rng, widths[i], widths[i + 1],
                final_activation if last else "relu",
                zero=zero_last and last,
            ))
        return cls(layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].d_in] + [l.d_out for l in self.layers]

    def forward(self, x) -> tuple[list[np.ndarray], list[AffineCache]]:
        x = as_matrix(x, "input")
        if x.shape[1] != self.layers[0].d_in:
            raise DimensionError(
                f"input width {x.shape[1]} does not match layer 0 width {self.layers[0].d_in}"
            )
        taps, caches = [], []
        for layer in self.layers:
            x, c = layer.forward(x)
            taps.append(x)
            caches.append(c)
        return taps, caches

    def backward(self, tap_grads: Sequence[np.ndarray | None], caches) -> np.ndarray:
        """Backpropagate gradients arriving at any subset of layer outputs."""
        g = None
        for layer_idx in range(len(self.layers) - 1, -1, -1):
            tg = tap_grads[layer_idx]
            if tg is not None:
                g = tg if g is None else g + tg
            if g is None:
                continue
            g = affine_backward(g, caches[layer_idx])
        if g is None:
            return np.zeros_like(caches[0].x)
        return g

    def params(self) -> list[ParamBlock]:
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "MLP":
        return copy.deepcopy(self)


class Backbone(MLP):
    """Feature extractor; the last layer is linear and yields the feature ``h``."""

    def taps(self, x) -> list[np.ndarray]:
        return self.forward(x)[0]

    def features(self, x) -> np.ndarray:
        return self.forward(x)[0][-1]


class Regressor(MLP):
    def predict(self, h) -> np.ndarray:
        return self.forward(h)[0][-1][:, 0]

    def forward_scores(self, h):
        taps, caches = self.forward(h)
        return taps[-1][:, 0], caches

    def backward_scores(self, dpred, caches) -> np.ndarray:
        dpred = np.asarray(dpred, dtype=np.float64).reshape(-1, 1)
        return self.backward([None] * (len(self.layers) - 1) + [dpred], caches)


class ManifoldProjector(MLP):
    """Residual map ``z -> z + p(z)``; final layer starts at zero (identity)."""

    @classmethod
    def init(cls, name, rng, widths, final_activation="none", zero_last=True):
        if widths[0] != widths[-1]:
            raise DimensionError("projector input and output widths must match")
        return super().init(name, rng, widths, final_activation, zero_last=zero_last)

    def project(self, z):
        z = as_matrix(z, "features")
        taps, caches = self.forward(z)
        return z + taps[-1], caches

    def backward_project(self, dout, caches) -> np.ndarray:
        """Gradient w.r.t. the projector input, including the identity path."""
        inner = self.backward([None] * (len(self.layers) - 1) + [dout], caches)
        return dout + inner

    def __call__(self, z):
        return self.project(z)[0]


def project(projector: ManifoldProjector, z) -> np.ndarray:
    return projector.project(z)[0]


def regress(regressor: Regressor, h) -> np.ndarray:
    return regressor.predict(h)


@dataclass
class ModelConfig:
    d_in: int = 16
    backbone_widths: tuple[int, ...] = (64, 64, 64, 32)
    regressor_hidden: int = 16
    projector_hidden: int | None = None  # defaults to the feature width


@dataclass
class ModelState:
    backbone: Backbone
    regressor: Regressor
    projector: ManifoldProjector
    frozen_prev_backbone: Backbone | None = field(default=None)

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ModelState":
        widths = [cfg.d_in, *cfg.backbone_widths]
        if len(widths) < 3:
            raise ValueError("backbone needs at least two layers")
        feat = widths[-1]
        hidden = cfg.projector_hidden or feat
        return cls(
            backbone=Backbone.init("backbone", rng, widths),
            regressor=Regressor.init("regressor", rng, [feat, cfg.regressor_hidden, 1]),
            projector=ManifoldProjector.init("projector", rng, [feat, hidden, feat]),
        )

    @property
    def feature_dim(self) -> int:
        return self.backbone.layers[-1].d_out

    def params(self) -> list[ParamBlock]:
        return self.backbone.params() + self.regressor.params() + self.projector.params()

    def predict(self, x) -> np.ndarray:
        return self.regressor.predict(self.backbone.features(x))

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params()])

    def to_dict(self) -> dict:
        def dump(mlp: MLP):
            return [
                {
                    "activation": layer.activation,
                    "weight": layer.weight.value.tolist(),
                    "bias": layer.bias.value.tolist(),
                }
                for layer in mlp.layers
            ]

        out = {
            "version": CHECKPOINT_VERSION,
            "backbone": dump(self.backbone),
            "regressor": dump(self.regressor),
            "projector": dump(self.projector),
        }
        if self.frozen_prev_backbone is not None:
            out["frozen_prev_backbone"] = dump(self.frozen_prev_backbone)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelState":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")

        def load(kind, name, entries):
            layers = [
                Layer(
                    ParamBlock(f"{name}.{i}.weight", np.array(e["weight"], dtype=np.float64)),
                    ParamBlock(f"{name}.{i}.bias", np.array(e["bias"], dtype=np.float64)),
                    e["activation"],
                )
                for i, e in enumerate(entries)
            ]
            return kind(layers)

        prev = d.get("frozen_prev_backbone")
        return cls(
            backbone=load(Backbone, "backbone", d["backbone"]),
            regressor=load(Regressor, "regressor", d["regressor"]),
            projector=load(ManifoldProjector, "projector", d["projector"]),
            frozen_prev_backbone=None if prev is None else load(Backbone, "prev", prev),
        )


def snapshot_prev_backbone(state: ModelState) -> Backbone:
    """Store a frozen deep copy of the current backbone as ``f^{t-1}``."""
    snap = state.backbone.copy()
    for p in snap.params():
        p.frozen = True
    state.frozen_prev_backbone = snap
    return snap


def save_checkpoint(state: ModelState, path) -> None:
    # repr-based float serialization is round-trip exact
    Path(path).write_text(json.dumps(state.to_dict()))


def load_checkpoint(path) -> ModelState:
    return ModelState.from_dict(json.loads(Path(path).read_text()))
