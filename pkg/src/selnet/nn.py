"""Layers, initialisation, Adam and step schedules for small MLPs."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, name: str = "dense"):
        if in_features <= 0 or out_features <= 0:
            raise ValueError(f"{name}: widths must be positive, got {in_features} -> {out_features}")
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(he_uniform(rng, in_features, out_features), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.bias_add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix=""):
        yield self.weight.name, self.weight
        yield self.bias.name, self.bias


class BatchNorm(Module):
    """Per-feature batch normalisation.

    Train mode normalises with the biased batch variance and folds the
    unbiased estimate into the running variance, so a batch of one row is
    rejected.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        self.width = width
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(width), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(width), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.name = name

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        if not train:
            return ad.batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        n = x.shape[0]
        if n < 2:
            raise ValueError(f"{self.name}: train-mode batch norm needs at least 2 rows, got {n}")
        out, mu, var = ad.batch_norm_train(x, self.gamma, self.beta, self.eps)
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * mu
        self.running_var = (1.0 - m) * self.running_var + m * var * (n / (n - 1))
        return out

    def named_parameters(self, prefix=""):
        yield self.gamma.name, self.gamma
        yield self.beta.name, self.beta


@dataclass(frozen=True)
class MLPSpec:
    """Input width, hidden widths, and whether each hidden layer has BN."""

    in_features: int
    hidden: tuple[int, ...]
    batch_norm: bool = False

    def __post_init__(self):
        widths = (self.in_features, *self.hidden)
        if not self.hidden or any(w <= 0 for w in widths):
            raise ValueError(f"invalid MLP widths {widths}")


# hidden widths and BN flag per dataset; input width comes from the data
ARCHITECTURES: dict[str, tuple[tuple[int, ...], bool]] = {
    "ccs": ((64,), True),
    "california": ((100, 100), False),
    "ames": ((100, 100), True),
}


def architecture(arch_id: str, in_features: int) -> MLPSpec:
    try:
        hidden, bn = ARCHITECTURES[arch_id]
    except KeyError:
        raise KeyError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}") from None
    return MLPSpec(in_features, hidden, bn)


class MLPBackbone(Module):
    """Dense -> [BatchNorm] -> ReLU, repeated per hidden width."""

    def __init__(self, spec: MLPSpec, rng: np.random.Generator):
        self.spec = spec
        self.dense: list[Dense] = []
        self.norms: list[BatchNorm | None] = []
        width = spec.in_features
        for i, h in enumerate(spec.hidden):
            self.dense.append(Dense(width, h, rng, name=f"backbone.{i}"))
            self.norms.append(BatchNorm(h, name=f"backbone.{i}.bn") if spec.batch_norm else None)
            width = h

    @property
    def out_features(self) -> int:
        return self.spec.hidden[-1]

    def __call__(self, x: Tensor, train: bool = True) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.spec.in_features:
            raise ad.ShapeError(f"backbone: expected [n, {self.spec.in_features}] input, got {x.shape}")
        h = x
        for dense, bn in zip(self.dense, self.norms):
            h = dense(h)
            if bn is not None:
                h = bn(h, train)
            h = ad.relu(h)
        return h

    def named_parameters(self, prefix=""):
        for dense, bn in zip(self.dense, self.norms):
            yield from dense.named_parameters()
            if bn is not None:
                yield from bn.named_parameters()

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for bn in self.norms:
            if bn is not None:
                out[f"{bn.name}.running_mean"] = bn.running_mean
                out[f"{bn.name}.running_var"] = bn.running_var
        return out


def init_params(spec: MLPSpec, seed: int | np.random.Generator) -> MLPBackbone:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return MLPBackbone(spec, rng)


# ------------------------------------------------------------------ optimiser


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: ad.GradientMap, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam: non-finite gradient for parameter {p.name or p!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        key = id(p)
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam: gradient shape {g.shape} != parameter shape {p.shape} for {p.name}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(beta1, beta2, eps)

    def step(self, grads: ad.GradientMap, lr: float) -> None:
        adam_step(self.params, grads, self.state, lr)


# ------------------------------------------------------------------ schedules


@dataclass(frozen=True)
class MultiStepLR:
    initial: float
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        object.__setattr__(self, "milestones", ms)

    def at(self, epoch: int) -> float:
        return lr_at_epoch(self, epoch)


def lr_at_epoch(sched: MultiStepLR, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return sched.initial * sched.factor ** bisect.bisect_right(sched.milestones, epoch)
