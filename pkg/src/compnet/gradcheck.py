"""Central finite-difference verification of the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def _scalarize(out: Tensor, probe: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return F.sum(out)
    return F.sum(F.mul(out, Tensor(probe)))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between autodiff and central differences.

    ``fn`` maps tensors (one per entry of ``inputs``) to an output tensor.
    Non-scalar outputs are contracted with a fixed random probe so every
    output element contributes.  ``fn`` must be deterministic; stochastic ops
    have to reseed inside ``fn``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    probe = None
    if out.size != 1:
        probe = np.random.default_rng(seed).standard_normal(out.shape)
    backward(_scalarize(out, probe))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value() -> float:
        return float(_scalarize(fn(*[Tensor(a) for a in arrays]), probe).data)

    worst = 0.0
    for a, grad in zip(arrays, analytic):
        numeric = np.empty_like(a)
        flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = value()
            flat[k] = orig - eps
            down = value()
            flat[k] = orig
            numeric.reshape(-1)[k] = (up - down) / (2 * eps)
        worst = max(worst, float(relative_error(grad, numeric, floor).max(initial=0.0)))
    return worst


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)


def _untie(rng: np.random.Generator, shape) -> np.ndarray:
    # Well-separated values keep max-pool windows away from ties and relu from its kink.
    # Even element counts give half-integer offsets, so no value sits at 0.
    vals = rng.permutation(int(np.prod(shape))).astype(np.float64)
    return ((vals - vals.mean()) * (4.0 / vals.size)).reshape(shape)


def primitive_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    """One random instance per primitive, all in double precision."""
    rng = np.random.default_rng(seed)
    rn = rng.standard_normal
    bn_stats = lambda c: (np.zeros(c), np.ones(c))  # noqa: E731

    def bn(x, g, b):
        return F.batchnorm2d(x, g, b, *bn_stats(x.shape[1]), mode="train")

    def bn_eval(x, g, b):
        return F.batchnorm2d(x, g, b, np.full(x.shape[1], 0.3), np.full(x.shape[1], 1.7), mode="eval")

    def drop(x):
        return F.dropout(x, 0.3, np.random.default_rng(7), mode="train")

    return [
        ("conv2d", F.conv2d, [rn((1, 3, 8, 8)), rn((4, 3, 3, 3)), rn(4)]),
        ("conv1x1", F.conv1x1, [rn((2, 3, 4, 4)), rn((2, 3, 1, 1)), rn(2)]),
        ("conv_transpose2d", F.conv_transpose2d, [rn((2, 3, 3, 3)), rn((3, 2, 2, 2)), rn(2)]),
        ("maxpool2", F.maxpool2, [_untie(rng, (2, 2, 4, 4))]),
        ("batchnorm2d[train]", bn, [rn((3, 2, 3, 3)), rn(2), rn(2)]),
        ("batchnorm2d[eval]", bn_eval, [rn((2, 2, 3, 3)), rn(2), rn(2)]),
        ("dropout[frozen mask]", drop, [rn((2, 3, 4, 4))]),
        ("sigmoid", F.sigmoid, [rn((2, 3, 4, 4))]),
        ("relu", F.relu, [_untie(rng, (2, 3, 4, 4))]),
        ("add", F.add, [rn((2, 3, 4, 4)), rn((2, 3, 4, 4))]),
        ("mul[broadcast]", F.mul, [rn((2, 3, 4, 4)), rn((2, 1, 4, 4))]),
        ("div", F.div, [rn((2, 3)), 2.0 + rng.random((2, 3))]),
        ("concat", lambda a, b: F.concat([a, b]), [rn((2, 3, 4, 4)), rn((2, 2, 4, 4))]),
        ("upsample_nearest", lambda x: F.upsample_nearest(x, 2), [rn((2, 3, 3, 3))]),
        ("mse", F.mse, [rn((2, 1, 4, 4)), rn((2, 1, 4, 4))]),
        ("sum", lambda x: F.sum(x, axis=(1, 2)), [rn((2, 3, 4))]),
    ]


def run_primitive_suite(tolerance: float = 1e-4, seed: int = 0, eps: float = 1e-4) -> list[CheckResult]:
    return [
        CheckResult(name, grad_check(fn, inputs, eps=eps, seed=seed), tolerance)
        for name, fn, inputs in primitive_cases(seed)
    ]


def loss_cases(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[np.ndarray]]]:
    from .losses import loss_eq1, soft_dice
    from .models import probability_gate

    rng = np.random.default_rng(seed + 1)
    shape = (2, 1, 4, 4)
    y = (rng.random(shape) > 0.5).astype(np.float64)
    x = rng.random(shape)

    def probs(shape):
        return 0.05 + 0.9 * rng.random(shape)

    return [
        ("soft_dice", lambda p: soft_dice(p, y), [probs(shape)]),
        ("loss_eq1", lambda s, c, r: loss_eq1(y, s, c, x, r), [probs(shape), probs(shape), probs(shape)]),
        ("probability_gate", probability_gate,
         [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4)),
          rng.standard_normal((1, 3, 1, 1)), rng.standard_normal(1)]),
    ]


def run_loss_suite(tolerance: float = 1e-4, seed: int = 0, eps: float = 1e-4) -> list[CheckResult]:
    return [
        CheckResult(name, grad_check(fn, inputs, eps=eps, seed=seed), tolerance)
        for name, fn, inputs in loss_cases(seed)
    ]


def tiny_model_config(variant: str = "optimal-compnet"):
    from .models import NetworkConfig

    return NetworkConfig(variant, width_scale=0.125, levels=2, growth_filters=3, dense_layers=(2, 2),
                         dropout_rate=0.3, seed=0)


def model_spot_check(config=None, n_params: int = 24, eps: float = 1e-4, seed: int = 0,
                     size: int = 8) -> list[tuple[str, int, float]]:
    """Autodiff vs central differences on randomly drawn scalar parameters of a whole network.

    Runs in double precision in train mode with a frozen dropout mask, on one
    random batch, through the full composite loss.  Returns
    ``(parameter name, flat index, relative error)`` per draw.
    """
    from .losses import model_loss
    from .models import build_model

    config = config or tiny_model_config()
    model = build_model(config, dtype=np.float64)
    rng = np.random.default_rng(seed)
    x = rng.random((2, 1, size, size))
    y = (rng.random((2, 1, size, size)) > 0.5).astype(np.float64)
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    def loss() -> Tensor:
        for k, v in model.named_buffers():
            v[...] = buffers[k]  # BN running stats must not drift between evaluations
        out = model(x, mode="train", rng=np.random.default_rng(seed + 99))
        return model_loss(out, y, x).total

    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    backward(loss())
    names = list(params)
    sizes = np.array([params[n].size for n in names], dtype=np.float64)
    results = []
    for _ in range(n_params):
        # Size-weighted draw: every scalar parameter is equally likely.
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        p = params[name]
        k = int(rng.integers(p.size))
        flat = p.data.reshape(-1)
        orig = flat[k]
        flat[k] = orig + eps
        up = loss().item()
        flat[k] = orig - eps
        down = loss().item()
        flat[k] = orig
        analytic = float(p.grad.reshape(-1)[k])
        numeric = (up - down) / (2 * eps)
        results.append((name, k, float(relative_error(np.array(analytic), np.array(numeric), 1e-6))))
    return results
