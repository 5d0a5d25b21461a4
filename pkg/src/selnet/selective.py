"""Selective networks: heads, coverage-constrained objective, and
straight-through Gumbel-softmax selection.

A selective model predicts ``f(x)`` when its selection head accepts ``x``
and abstains otherwise.  Training minimises

    selective_risk + lam * max(0, c - coverage)**2

mixed with a plain auxiliary-head loss.  In ``soft`` mode the selection
head's probability ``g`` weights each sample directly.  In ``gumbel`` mode
every sample is hard-selected by the Gumbel-max trick on the two-way
distribution ``(g, 1 - g)``; gradients flow through the temperature-``tau``
softmax relaxation of the same noisy logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import EPS, Tensor
from .nn import Dense, MLPBackbone, Module

COVERAGE_EPS = 1e-8

SelectionMode = Literal["gumbel", "soft"]
BaseLoss = Literal["squared", "absolute", "cross_entropy"]


@dataclass(frozen=True)
class SelectiveLossConfig:
    coverage: float = 1.0
    lam: float = 32.0
    alpha: float = 0.5
    mode: SelectionMode = "gumbel"
    loss: BaseLoss = "squared"

    def __post_init__(self):
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError(f"target coverage must be in (0, 1], got {self.coverage}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.mode not in ("gumbel", "soft"):
            raise ValueError(f"selection mode must be 'gumbel' or 'soft', got {self.mode!r}")
        if self.loss not in ("squared", "absolute", "cross_entropy"):
            raise ValueError(f"unknown base loss {self.loss!r}")


@dataclass(frozen=True)
class TemperatureSchedule:
    initial: float = 30.0
    rate: float = 0.985
    step: int = 5

    def __post_init__(self):
        if self.initial <= 0:
            raise ValueError(f"initial temperature must be > 0, got {self.initial}")
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"decay rate must be in (0, 1], got {self.rate}")
        if self.step < 1:
            raise ValueError(f"step interval must be >= 1, got {self.step}")

    def at(self, epoch: int) -> float:
        return temperature_at_epoch(self, epoch)


def temperature_at_epoch(sched: TemperatureSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return sched.initial * sched.rate ** (epoch // sched.step)


# -------------------------------------------------------------------- model


class SelectiveModel(Module):
    """Shared backbone with prediction, selection and auxiliary heads."""

    def __init__(self, backbone: MLPBackbone, out_features: int, rng: np.random.Generator, selector_width: int = 16):
        width = backbone.out_features
        self.backbone = backbone
        self.out_features = out_features
        self.predictor = Dense(width, out_features, rng, name="predictor")
        self.selector_hidden = Dense(width, selector_width, rng, name="selector.0")
        self.selector_out = Dense(selector_width, 1, rng, name="selector.1")
        self.auxiliary = Dense(width, out_features, rng, name="auxiliary")

    def __call__(self, x: Tensor, train: bool = True) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(f(x), g(x), h(x))``; ``g`` has shape ``[n]``."""
        rep = self.backbone(x, train)
        g = ad.sigmoid(self.selector_out(ad.relu(self.selector_hidden(rep))))
        return self.predictor(rep), ad.reshape(g, (x.shape[0],)), self.auxiliary(rep)

    def named_parameters(self, prefix=""):
        yield from self.backbone.named_parameters()
        for layer in (self.predictor, self.selector_hidden, self.selector_out, self.auxiliary):
            yield from layer.named_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({k: v.copy() for k, v in self.backbone.buffers().items()})
        return out


def predict(model: SelectiveModel, x: np.ndarray | Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free inference: predictions ``f(x)`` and confidences ``g(x)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    with ad.no_record():
        f, g, _ = model(x, train=False)
    return f.data, g.data


# -------------------------------------------------------------- gumbel noise


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), EPS, 1.0 - EPS)
    return -np.log(-np.log(u))


def sample_gumbel(n: int | tuple[int, ...], rng: np.random.Generator) -> Tensor:
    """Standard Gumbel draws via ``-log(-log(U))``."""
    return Tensor._wrap(gumbel_from_uniform(rng.random(n)))


def gumbel_max(log_probs: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """One-hot argmax of ``log_probs + noise`` along the last axis."""
    idx = np.argmax(log_probs + noise, axis=-1)
    return np.eye(log_probs.shape[-1])[idx]


def gumbel_softmax(log_probs: Tensor, noise: Tensor, tau: float) -> Tensor:
    """Temperature-``tau`` softmax of noisy log-probabilities, ``[n, k]``."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return ad.softmax(ad.scale(log_probs + noise, 1.0 / tau))


@dataclass
class SelectionOutcome:
    g_prob: Tensor
    z_hard: Tensor
    z_soft: Tensor
    z_st: Tensor


def gumbel_softmax_binary(
    g_prob: Tensor,
    tau: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> SelectionOutcome:
    """Straight-through binary selection for ``[n]`` selection probabilities.

    ``noise`` (shape ``[n, 2]``) overrides sampling, for fixtures and
    gradient checks.  The forward value of ``z_st`` is exactly ``z_hard``.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    n = g_prob.shape[0]
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax_binary needs rng or explicit noise")
        noise = sample_gumbel((n, 2), rng).data
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (n, 2):
        raise ad.ShapeError(f"gumbel_softmax_binary: noise shape {noise.shape} != {(n, 2)}")
    col = (n, 1)
    log_pi = ad.concat([ad.reshape(ad.log(g_prob), col), ad.reshape(ad.log(1.0 - g_prob), col)], axis=1)
    z_hard = Tensor._wrap((log_pi.data[:, 0] + noise[:, 0] >= log_pi.data[:, 1] + noise[:, 1]).astype(np.float64))
    z_soft = ad.column(gumbel_softmax(log_pi, Tensor._wrap(noise), tau), 0)
    z_st = z_hard + (z_soft - ad.stop_gradient(z_soft))
    return SelectionOutcome(g_prob, z_hard, z_soft, z_st)


# ---------------------------------------------------------------- objective


def empirical_coverage(z: Tensor) -> Tensor:
    if z.data.size == 0:
        raise ValueError("empirical_coverage: empty batch")
    return ad.mean(z)


def selective_risk(losses: Tensor, z: Tensor) -> Tensor:
    if losses.shape != z.shape:
        raise ad.ShapeError(f"selective_risk: shape mismatch {losses.shape} vs {z.shape}")
    if z.data.size == 0:
        raise ValueError("selective_risk: empty batch")
    return ad.mean(losses * z) / ad.maximum(empirical_coverage(z), COVERAGE_EPS)


def coverage_penalty(c: float, coverage: Tensor | float) -> Tensor:
    coverage = ad.as_tensor(coverage)
    return ad.square(ad.maximum(c - coverage, 0.0))


def selective_loss(cfg: SelectiveLossConfig, losses: Tensor, z: Tensor) -> Tensor:
    risk = selective_risk(losses, z)
    if cfg.lam == 0:
        return risk
    return risk + ad.scale(coverage_penalty(cfg.coverage, empirical_coverage(z)), cfg.lam)


def pointwise_loss(pred: Tensor, target: Tensor, kind: BaseLoss) -> Tensor:
    """Per-row loss ``[n]`` between ``[n, k]`` predictions and targets.

    For cross-entropy ``pred`` holds logits and ``target`` one-hot rows.
    """
    if pred.shape != target.shape:
        raise ad.ShapeError(f"pointwise_loss: shape mismatch {pred.shape} vs {target.shape}")
    if kind == "squared":
        return ad.sum(ad.square(pred - target), axis=1)
    if kind == "absolute":
        return ad.sum(ad.abs(pred - target), axis=1)
    if kind == "cross_entropy":
        return ad.neg(ad.sum(target * ad.log(ad.softmax(pred)), axis=1))
    raise ValueError(f"unknown base loss {kind!r}")


@dataclass
class LossBreakdown:
    total: Tensor
    selective: Tensor
    auxiliary: Tensor
    coverage: float
    selection: SelectionOutcome | None = None


def total_loss(
    cfg: SelectiveLossConfig,
    pred: Tensor,
    aux_pred: Tensor,
    g_prob: Tensor,
    target: Tensor,
    tau: float | None = None,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> LossBreakdown:
    """Mix of the selective objective on ``f`` and the plain loss on ``h``."""
    selection = None
    if cfg.mode == "gumbel":
        if tau is None:
            raise ValueError("gumbel mode needs a temperature")
        selection = gumbel_softmax_binary(g_prob, tau, rng=rng, noise=noise)
        z = selection.z_st
    else:
        z = g_prob
    sel = selective_loss(cfg, pointwise_loss(pred, target, cfg.loss), z)
    if cfg.alpha == 1.0:
        aux = Tensor(0.0)
        total = sel
    else:
        aux = ad.mean(pointwise_loss(aux_pred, target, cfg.loss))
        total = ad.scale(sel, cfg.alpha) + ad.scale(aux, 1.0 - cfg.alpha)
    return LossBreakdown(total, sel, aux, float(z.data.mean()), selection)
