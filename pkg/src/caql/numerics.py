"""Dense linear algebra primitives with hand-derived gradients.

Matrices are plain ``float64`` numpy arrays. Every learnable tensor lives in a
:class:`ParamBlock`, which also carries its gradient and Adam moments.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Counter-based generator for the stream identified by ``(seed, *keys)``.

    String keys are hashed with CRC32 so that named streams (``"replay"``,
    ``"init"``) are stable across interpreter runs.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class ParamBlock:
    """A learnable matrix plus its gradient and optimizer state."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = field(default=0, init=False)
    frozen: bool = False

    def __post_init__(self):
        self.value = as_matrix(self.value, self.name).copy()
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(
                f"gradient for {self.name} has shape {g.shape}, expected {self.value.shape}"
            )
        self.grad += g

    def copy(self) -> "ParamBlock":
        out = ParamBlock(self.name, self.value.copy(), frozen=self.frozen)
        out.m = self.m.copy()
        out.v = self.v.copy()
        out.step = self.step
        return out


def glorot_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_in, d_out))


@dataclass
class AffineCache:
    x: np.ndarray
    pre: np.ndarray
    weight: ParamBlock
    bias: ParamBlock
    activation: str


def affine_forward(x, weight: ParamBlock, bias: ParamBlock, activation: str = "none"):
    """Return ``(act(x @ W + b), cache)``."""
    x = as_matrix(x, "input")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"input {x.shape} does not conform to weight {weight.shape}"
        )
    if bias.shape != (1, weight.shape[1]):
        raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
    pre = x @ weight.value + bias.value
    if activation == "relu":
        out = np.maximum(pre, 0.0)
    elif activation == "none":
        out = pre
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return out, AffineCache(x, pre, weight, bias, activation)


def affine_backward(upstream, cache: AffineCache | None) -> np.ndarray:
    """Accumulate parameter gradients and return the gradient w.r.t. the input."""
    if cache is None:
        raise StateError("affine_backward called without a forward cache")
    upstream = as_matrix(upstream, "upstream")
    if upstream.shape != cache.pre.shape:
        raise DimensionError(
            f"upstream gradient {upstream.shape} does not match output {cache.pre.shape}"
        )
    if cache.activation == "relu":
        dpre = upstream * (cache.pre > 0.0)
    else:
        dpre = upstream
    if not cache.weight.frozen:
        cache.weight.grad += cache.x.T @ dpre
    if not cache.bias.frozen:
        cache.bias.grad += dpre.sum(axis=0, keepdims=True)
    return dpre @ cache.weight.value.T


def adam_step(
    params: Iterable[ParamBlock],
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
) -> None:
    """Adam with bias correction and decoupled weight decay; zeroes grads."""
    params = [p for p in params if not p.frozen]
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter block {p.name!r}")
    b1, b2 = betas
    for p in params:
        p.step += 1
        p.m *= b1
        p.m += (1.0 - b1) * p.grad
        p.v *= b2
        p.v += (1.0 - b2) * p.grad * p.grad
        m_hat = p.m / (1.0 - b1**p.step)
        v_hat = p.v / (1.0 - b2**p.step)
        if weight_decay:
            p.value -= lr * weight_decay * p.value
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[ParamBlock],
    perturbation: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` evaluates the loss at the current parameter values and
    accumulates analytic gradients into each block's ``grad``.
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    for p in params:
        p.zero_grad()
    base = loss_fn()
    if not np.isfinite(base):
        raise NumericError("loss is not finite at the probe point")
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + perturbation
            up = loss_fn()
            flat[k] = old - perturbation
            down = loss_fn()
            flat[k] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while probing {p.name}[{k}]")
            numeric = (up - down) / (2.0 * perturbation)
            ak = a.reshape(-1)[k]
            err = abs(ak - numeric) / max(1e-8, abs(ak) + abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
