"""Finite-difference verification of every backward rule and the composed
selective training loss, plus Monte Carlo checks of the Gumbel sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Dense, MLPSpec, init_params
from .selective import SelectiveLossConfig, SelectiveModel, gumbel_softmax_binary, sample_gumbel, total_loss

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7
EULER_GAMMA = 0.5772156649015329


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_error: float
    detail: str = ""
    label: str = "max_rel_err"

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<34} {self.label}={self.max_rel_error:.3e}{extra}"


def numeric_gradient(f: Callable[[], float], arrays: Sequence[np.ndarray], step: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        out.append(g)
    return out


def compare(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> tuple[bool, float]:
    """Pass flag and worst error, relative with an absolute fallback.

    An element passes if its relative error is below REL_TOL or its
    absolute error below ABS_TOL; the reported error is
    ``min(rel, abs * REL_TOL / ABS_TOL)``, so it passes iff below REL_TOL.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
        err = np.minimum(rel, diff * (REL_TOL / ABS_TOL))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst < REL_TOL, worst


def check_function(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0) -> CheckResult:
    """Gradcheck ``sum(w * fn(*inputs))`` for a random projection ``w``.

    stop_gradient outputs are held at their unperturbed values.
    """
    rng = np.random.default_rng([seed, 99])
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor._wrap(a) for a in arrays]
    for t in tensors:
        t.requires_grad = True
    with ad.no_record():
        probe = fn(*tensors)
    w = Tensor(rng.uniform(0.5, 1.5, size=probe.shape))

    def loss() -> Tensor:
        out = fn(*tensors)
        return ad.sum(out * w) if out.ndim else out * 1.0

    with ad.frozen_stop_gradients() as stopped, ad.Tape() as tape:
        value = loss()
    grads = tape.gradient(value, tensors)
    analytic = [grads[t] for t in tensors]
    frozen = list(stopped)

    def f() -> float:
        with ad.frozen_stop_gradients(frozen):
            return loss().item()

    with ad.no_record():
        numeric = numeric_gradient(f, arrays)
    ok, worst = compare(analytic, numeric)
    return CheckResult(name, ok, worst)


def _away_from(x: np.ndarray, point: float, gap: float = 0.05) -> np.ndarray:
    close = np.abs(x - point) < gap
    return np.where(close, x + np.sign(x - point + 1e-300) * 2 * gap, x)


def operator_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    def u(*shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, size=shape)

    n, k, m = 5, 4, 3
    return {
        "matmul": (ad.matmul, [u(n, k), u(k, m)]),
        "add": (ad.add, [u(n, k), u(n, k)]),
        "add (scalar tensor)": (ad.add, [u(n, k), u()]),
        "sub": (ad.sub, [u(n, k), u(n, k)]),
        "mul": (ad.mul, [u(n, k), u(n, k)]),
        "div": (ad.div, [u(n, k), u(n, k, lo=0.5, hi=2.0)]),
        "div (scalar tensor)": (ad.div, [u(n), u(lo=0.5, hi=2.0)]),
        "bias_add": (ad.bias_add, [u(n, k), u(k)]),
        "relu": (ad.relu, [_away_from(u(n, k), 0.0)]),
        "sigmoid": (ad.sigmoid, [u(n, k)]),
        "exp": (ad.exp, [u(n, k)]),
        "log": (ad.log, [u(n, k, lo=0.1, hi=2.0)]),
        "neg": (ad.neg, [u(n, k)]),
        "square": (ad.square, [u(n, k)]),
        "abs": (ad.abs, [_away_from(u(n, k), 0.0)]),
        "maximum": (lambda x: ad.maximum(x, 0.3), [_away_from(u(n, k), 0.3)]),
        "softmax": (ad.softmax, [u(n, k)]),
        "mean": (ad.mean, [u(n, k)]),
        "mean (axis 0)": (lambda x: ad.mean(x, axis=0), [u(n, k)]),
        "sum": (ad.sum, [u(n, k)]),
        "sum (axis 1)": (lambda x: ad.sum(x, axis=1), [u(n, k)]),
        "scale": (lambda x: ad.scale(x, -1.7), [u(n, k)]),
        "add_scalar": (lambda x: ad.add_scalar(x, 0.4), [u(n, k)]),
        "reshape": (lambda x: ad.reshape(x, (k, n)), [u(n, k)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [u(n, 2), u(n, 3)]),
        "column": (lambda x: ad.column(x, 1), [u(n, k)]),
        "stop_gradient": (lambda x: ad.square(x) + ad.stop_gradient(ad.exp(x)), [u(n, k)]),
        "batch_norm_train": (lambda x, g, b: ad.batch_norm_train(x, g, b)[0], [u(8, k), u(k), u(k)]),
        "batch_norm_eval": (
            lambda x, g, b: ad.batch_norm_eval(x, g, b, np.full(k, 0.2), np.full(k, 1.5)),
            [u(n, k), u(k), u(k)],
        ),
    }


def check_operators(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [check_function(name, fn, inputs, seed) for name, fn, inputs in ((k, *v) for k, v in operator_cases(rng).items())]
    results.append(_check_sigmoid_dense(rng))
    return results


def _check_sigmoid_dense(rng: np.random.Generator) -> CheckResult:
    # loss = mean(sigmoid(W x + b))
    return check_function(
        "mean(sigmoid(xW + b))",
        lambda x, W, b: ad.mean(ad.sigmoid(ad.bias_add(ad.matmul(x, W), b))),
        [rng.uniform(-2, 2, (6, 5)), rng.uniform(-2, 2, (5, 3)), rng.uniform(-2, 2, 3)],
    )


def _model_gradcheck(name: str, model, loss_fn: Callable[[], Tensor], freeze: bool) -> CheckResult:
    params = model.parameters()
    if freeze:
        with ad.frozen_stop_gradients() as stopped, ad.Tape() as tape:
            value = loss_fn()
        frozen = list(stopped)
    else:
        with ad.Tape() as tape:
            value = loss_fn()
    grads = tape.gradient(value, params)
    analytic = [grads[p] for p in params]

    def f() -> float:
        if freeze:
            with ad.frozen_stop_gradients(frozen):
                return loss_fn().item()
        return loss_fn().item()

    with ad.no_record():
        numeric = numeric_gradient(f, [p.data for p in params])
    ok, worst = compare(analytic, numeric)
    bad = [p.name for p, a, n in zip(params, analytic, numeric) if not compare([a], [n])[0]]
    return CheckResult(name, ok, worst, f"failing: {', '.join(bad)}" if bad else "")


def check_backbone(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 1])
    backbone = init_params(MLPSpec(8, (16,), batch_norm=False), rng)
    head = Dense(16, 1, rng, name="head")
    x = Tensor(rng.uniform(-2, 2, (6, 8)))
    y = Tensor(rng.uniform(-2, 2, (6, 1)))

    class _Net:
        def parameters(self):
            return backbone.parameters() + head.parameters()

    return _model_gradcheck(
        "backbone 8->16->1", _Net(), lambda: ad.mean(ad.square(head(backbone(x, True)) - y)), freeze=False
    )


def _small_selective(seed: int, batch_norm: bool = True) -> tuple[SelectiveModel, Tensor, Tensor]:
    rng = np.random.default_rng([seed, 2])
    backbone = init_params(MLPSpec(4, (8,), batch_norm=batch_norm), rng)
    model = SelectiveModel(backbone, 1, rng, selector_width=8)
    x = Tensor(rng.uniform(-2, 2, (8, 4)))
    y = Tensor(rng.uniform(-2, 2, (8, 1)))
    return model, x, y


def check_selective_loss(seed: int = 0, mode: str = "gumbel") -> CheckResult:
    model, x, y = _small_selective(seed)
    cfg = SelectiveLossConfig(coverage=0.7, lam=32.0, alpha=0.5, mode=mode)
    noise = sample_gumbel((8, 2), np.random.default_rng([seed, 3])).data

    def loss() -> Tensor:
        f, g, h = model(x, train=True)
        return total_loss(cfg, f, h, g, y, tau=2.0, noise=noise).total

    return _model_gradcheck(f"total_loss ({mode}, fixed noise)", model, loss, freeze=(mode == "gumbel"))


def check_gumbel_mean(n: int = 1_000_000, seed: int = 0) -> CheckResult:
    m = float(sample_gumbel(n, np.random.default_rng([seed, 4])).data.mean())
    err = abs(m - EULER_GAMMA)
    return CheckResult("gumbel mean", err < 0.01, err, f"mean={m:.4f} (gamma=0.5772, tol 0.01)", label="abs_err")


def check_gumbel_max_rates(
    probs: Sequence[float] = (0.1, 0.3, 0.5, 0.7, 0.9), n: int = 1_000_000, seed: int = 0
) -> CheckResult:
    rng = np.random.default_rng([seed, 5])
    worst = 0.0
    rates = []
    for p in probs:
        out = gumbel_softmax_binary(Tensor(np.full(n, p)), tau=1.0, rng=rng)
        rate = float(out.z_hard.data.mean())
        rates.append(f"{p}:{rate:.4f}")
        worst = max(worst, abs(rate - p))
    return CheckResult("gumbel-max selection rate", worst <= 0.005, worst, " ".join(rates), label="max_abs_err")


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    results = check_operators(seed)
    results.append(check_backbone(seed))
    results.append(check_selective_loss(seed, "gumbel"))
    results.append(check_selective_loss(seed, "soft"))
    results.append(check_gumbel_mean(seed=seed))
    results.append(check_gumbel_max_rates(seed=seed))
    return results
