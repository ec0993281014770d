"""Dense float64 primitives, Adam, a splitmix64 PRNG and a finite-difference checker.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Everything here is a
pure function of its arguments (plus explicit :class:`Rng` state), so results are
reproducible bit-for-bit for identical inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "OptimizerError",
    "ReproducibilityError",
    "Param",
    "AdamHyper",
    "Rng",
    "as_tensor",
    "matmul",
    "layer_norm",
    "layer_norm_backward",
    "sigmoid",
    "softplus",
    "bce_loss",
    "bce_with_logits",
    "adam_step",
    "grad_check",
    "glorot_uniform",
]

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class OptimizerError(ArithmeticError):
    pass


class ReproducibilityError(RuntimeError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated over the inner index in ascending order.

    Each output entry is ``((0 + a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``, the same
    sequence of roundings as a textbook triple loop, so the result does not
    depend on the BLAS build or thread count.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"matmul inner dims disagree: {m}x{k} @ {k2}x{n}")
    out = np.zeros((m, n))
    for p in range(k):
        out += a[:, p, None] * b[None, p, :]
    return out


# ---------------------------------------------------------------------------
# normalisation

def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """LayerNorm over the last axis with biased variance.

    Works on a single vector or on a batch of rows.
    """
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm needs at least one feature")
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"gamma/beta shape {gamma.shape}/{beta.shape} does not match features {x.shape[-1]}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return gamma * (xc / np.sqrt(var + eps)) + beta


def layer_norm_backward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    eps: float,
    upstream: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_x, grad_gamma, grad_beta)``.

    For batched input, the parameter gradients are summed over rows.
    """
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    if upstream.shape != x.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match input {x.shape}")
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    g_xhat = upstream * gamma
    grad_x = inv_std * (
        g_xhat
        - g_xhat.sum(axis=-1, keepdims=True) / d
        - xhat * (g_xhat * xhat).sum(axis=-1, keepdims=True) / d
    )
    if x.ndim == 1:
        return grad_x, upstream * xhat, upstream.copy()
    flat_up = upstream.reshape(-1, d)
    return grad_x, (flat_up * xhat.reshape(-1, d)).sum(axis=0), flat_up.sum(axis=0)


# ---------------------------------------------------------------------------
# activations and losses

def sigmoid(x):
    x = as_tensor(x)
    # exp() only ever sees non-positive arguments
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = as_tensor(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_with_logits(z, t) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of ``sigmoid(z)`` against targets ``t``.

    Returns ``(loss, d loss / d z)``.
    """
    z = np.atleast_1d(as_tensor(z))
    t = np.atleast_1d(as_tensor(t))
    if z.size == 0:
        raise ValueError("bce on empty input")
    if z.shape != t.shape:
        raise ShapeError(f"logits {z.shape} vs targets {t.shape}")
    # -[t log s(z) + (1-t) log(1-s(z))] = softplus(z) - t z
    loss = float(np.mean(softplus(z) - t * z))
    grad = (sigmoid(z) - t) / z.size
    return loss, grad


def bce_loss(p, t) -> float:
    """Mean binary cross-entropy for probabilities ``p`` against ``{0,1}`` targets.

    Probabilities are mapped back to logits so that saturated inputs stay finite.
    """
    p = np.atleast_1d(as_tensor(p))
    t = np.atleast_1d(as_tensor(t))
    if p.size == 0:
        raise ValueError("bce on empty input")
    if p.shape != t.shape:
        raise ShapeError(f"probabilities {p.shape} vs targets {t.shape}")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    tiny = np.finfo(np.float64).tiny
    log_p = np.log(np.maximum(p, tiny))
    log_q = np.log(np.maximum(1.0 - p, tiny))
    return float(np.mean(-(t * log_p + (1.0 - t) * log_q)))


# ---------------------------------------------------------------------------
# parameters and optimisation

@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step_count: int = 0
    frozen: bool = False

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(param: Param, hyper: AdamHyper = AdamHyper()) -> Param:
    """Bias-corrected Adam update, in place. The gradient is left untouched."""
    g = param.grad
    if not np.all(np.isfinite(g)):
        raise OptimizerError(f"non-finite gradient in parameter {param.name!r}")
    param.step_count += 1
    t = param.step_count
    param.m *= hyper.beta1
    param.m += (1.0 - hyper.beta1) * g
    param.v *= hyper.beta2
    param.v += (1.0 - hyper.beta2) * (g * g)
    m_hat = param.m / (1.0 - hyper.beta1**t)
    v_hat = param.v / (1.0 - hyper.beta2**t)
    param.value -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return param


def glorot_uniform(rng: "Rng", shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform_array(int(np.prod(shape)), -a, a).reshape(shape)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(
    loss_fn: Callable[[], float],
    params: Sequence[Param],
    eps: float = 1e-5,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``loss_fn`` must return the loss and leave the analytic gradient in every
    ``param.grad`` (it is responsible for zeroing them first). The step for a
    scalar ``theta`` is ``eps * (1 + |theta|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = loss_fn()
    analytic = [p.grad.copy() for p in params]
    again = loss_fn()
    if again != base:
        raise ReproducibilityError(f"loss is not reproducible: {base!r} != {again!r}")

    worst = 0.0
    for p, a_grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for idx in range(flat.size):
            theta = flat[idx]
            h = eps * (1.0 + abs(theta))
            hi, lo = theta + h, theta - h
            flat[idx] = hi
            up = loss_fn()
            flat[idx] = lo
            down = loss_fn()
            flat[idx] = theta
            # divide by the step actually taken, not the rounded-away ideal
            numeric = (up - down) / (hi - lo)
            a = a_flat[idx]
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, rel)
    # leave the analytic gradients in place for the caller
    for p, a_grad in zip(params, analytic):
        p.grad[...] = a_grad
    return float(worst)


# ---------------------------------------------------------------------------
# random numbers

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_NP_GAMMA = np.uint64(_GAMMA)


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 generator.

    ``next_u64_array`` and ``uniform_array`` return exactly the values repeated
    scalar calls would, and advance the state by the same amount.
    """

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & _MASK64

    def child(self, offset: int) -> "Rng":
        """Independent stream for a named purpose, derived from the current state."""
        return Rng((self.state + int(offset)) & _MASK64)

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        return _mix64(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * _NP_GAMMA
            out = _mix64_array(states)
        self.state = (self.state + n * _GAMMA) & _MASK64
        return out

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        if lo > hi:
            raise ValueError("uniform needs lo <= hi")
        return lo + (hi - lo) * self.random()

    def uniform_array(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        if lo > hi:
            raise ValueError("uniform needs lo <= hi")
        u = (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * u

    def gauss(self, mean: float, std: float) -> float:
        if std < 0:
            raise ValueError("std must be non-negative")
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mean + std * z

    def gauss_array(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise ValueError("std must be non-negative")
        u = self.uniform_array(2 * n).reshape(n, 2)
        z = np.sqrt(-2.0 * np.log(1.0 - u[:, 0])) * np.cos(2.0 * np.pi * u[:, 1])
        return mean + std * z

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]`` inclusive."""
        if lo > hi:
            raise ValueError("randint needs lo <= hi")
        return lo + min(int(self.random() * (hi - lo + 1)), hi - lo)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i)
            order[i], order[j] = order[j], order[i]
        return order
