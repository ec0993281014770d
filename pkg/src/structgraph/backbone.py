"""Small trainable conv stack: (conv3x3 -> ReLU -> maxpool2) per block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import Param, Rng, ShapeError, glorot_uniform, matmul

KERNEL = 3
POOL = 2


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[int, ...] = (8, 16, 32)
    input_channels: int = 1

    def __post_init__(self) -> None:
        if len(self.blocks) < 1 or any(c < 1 for c in self.blocks):
            raise ValueError(f"invalid backbone blocks {self.blocks!r}")

    @property
    def downsample(self) -> int:
        return POOL ** len(self.blocks)

    @property
    def out_channels(self) -> int:
        return self.blocks[-1]

    @property
    def min_size(self) -> int:
        return self.downsample * 2


@dataclass
class FeatureMap:
    tensor: np.ndarray  # C x H x W
    downsample: int

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tensor.shape


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray) -> np.ndarray:
    """(Cin, H, W) -> (Cin*9, H*W), rows ordered (cin, ki, kj)."""
    cin, h, w = x.shape
    padded = np.zeros((cin, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = x
    cols = np.empty((cin, KERNEL, KERNEL, h, w))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            cols[:, ki, kj] = padded[:, ki:ki + h, kj:kj + w]
    return cols.reshape(cin * KERNEL * KERNEL, h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    cin, h, w = shape
    cols = cols.reshape(cin, KERNEL, KERNEL, h, w)
    padded = np.zeros((cin, h + 2, w + 2))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            padded[:, ki:ki + h, kj:kj + w] += cols[:, ki, kj]
    return padded[:, 1:-1, 1:-1]


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray) -> None:
    if x.ndim != 3:
        raise ShapeError(f"conv input must be Cin x H x W, got {x.shape}")
    if weights.ndim != 4 or weights.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv weights must be Cout x Cin x 3 x 3, got {weights.shape}")
    if weights.shape[1] != x.shape[0]:
        raise ShapeError(f"conv channel mismatch: input has {x.shape[0]}, weights expect {weights.shape[1]}")


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation, zero padding 1, stride 1."""
    _check_conv_shapes(x, weights)
    cout = weights.shape[0]
    _, h, w = x.shape
    out = matmul(weights.reshape(cout, -1), _im2col(x))
    return (out + bias[:, None]).reshape(cout, h, w)


def conv2d_backward(
    x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_conv_shapes(x, weights)
    cout = weights.shape[0]
    up = upstream.reshape(cout, -1)
    cols = _im2col(x)
    grad_w = (up @ cols.T).reshape(weights.shape)
    grad_cols = weights.reshape(cout, -1).T @ up
    grad_x = _col2im(grad_cols, x.shape)
    grad_b = up.sum(axis=1)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling

def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pool. Returns the output and the winning position (0..3) per window.

    Ties go to the first window entry in row-major order, which is the smallest
    flat index. An odd trailing row/column is dropped.
    """
    c, h, w = x.shape
    if h < POOL or w < POOL:
        raise ShapeError(f"maxpool2 needs H, W >= 2, got {h}x{w}")
    oh, ow = h // POOL, w // POOL
    windows = (
        x[:, : oh * POOL, : ow * POOL]
        .reshape(c, oh, POOL, ow, POOL)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, oh, ow, POOL * POOL)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(upstream: np.ndarray, idx: np.ndarray, input_shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = input_shape
    oh, ow = idx.shape[1:]
    windows = np.zeros((c, oh, ow, POOL * POOL))
    np.put_along_axis(windows, idx[..., None], upstream[..., None], axis=-1)
    grad = np.zeros(input_shape)
    grad[:, : oh * POOL, : ow * POOL] = (
        windows.reshape(c, oh, ow, POOL, POOL).transpose(0, 1, 3, 2, 4).reshape(c, oh * POOL, ow * POOL)
    )
    return grad


def pool_margin(x: np.ndarray) -> float:
    """Smallest winner/runner-up gap over windows whose winner is positive.

    Windows that are entirely zero (dead ReLUs) pass no gradient, so their ties
    are harmless.
    """
    c, h, w = x.shape
    oh, ow = h // POOL, w // POOL
    windows = (
        x[:, : oh * POOL, : ow * POOL]
        .reshape(c, oh, POOL, ow, POOL)
        .transpose(0, 1, 3, 2, 4)
        .reshape(-1, POOL * POOL)
    )
    s = np.sort(windows, axis=-1)
    live = s[:, -1] > 0
    if not live.any():
        return float("inf")
    return float((s[live, -1] - s[live, -2]).min())


# ---------------------------------------------------------------------------
# the stack

class Backbone:
    def __init__(self, config: BackboneConfig, rng: Rng | None = None) -> None:
        self.config = config
        self.params: list[tuple[Param, Param]] = []
        cin = config.input_channels
        for k, cout in enumerate(config.blocks):
            shape = (cout, cin, KERNEL, KERNEL)
            w = (
                glorot_uniform(rng, shape, cin * KERNEL * KERNEL, cout * KERNEL * KERNEL)
                if rng is not None
                else np.zeros(shape)
            )
            self.params.append((Param(f"backbone.conv{k}.weight", w), Param(f"backbone.conv{k}.bias", np.zeros(cout))))
            cin = cout
        self._cache: list[tuple] = []

    def parameters(self) -> list[Param]:
        return [p for pair in self.params for p in pair]

    def forward(self, image: np.ndarray) -> FeatureMap:
        if image.ndim == 2:
            image = image[None]
        if image.shape[0] != self.config.input_channels:
            raise ShapeError(f"backbone expects {self.config.input_channels} channel(s), got {image.shape[0]}")
        size = min(image.shape[1:])
        if size < self.config.min_size:
            raise ShapeError(
                f"image {image.shape[1]}x{image.shape[2]} too small for {len(self.config.blocks)} pooling stages; "
                f"minimum size is {self.config.min_size}"
            )
        self._cache = []
        x = image
        for w, b in self.params:
            pre = conv2d_forward(x, w.value, b.value)
            act = np.maximum(pre, 0.0)
            out, idx = maxpool2(act)
            self._cache.append((x, pre, idx))
            x = out
        return FeatureMap(x, self.config.downsample)

    def backward(self, grad_features: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient w.r.t. the image."""
        g = grad_features
        for (w, b), (x, pre, idx) in zip(reversed(self.params), reversed(self._cache)):
            g = maxpool2_backward(g, idx, pre.shape)
            g = g * (pre > 0)
            gx, gw, gb = conv2d_backward(x, w.value, g)
            w.grad += gw
            b.grad += gb
            g = gx
        return g

    def activation_margin(self) -> float:
        """Distance of the last forward pass from any ReLU or max-pool kink."""
        margin = np.inf
        for _, pre, _ in self._cache:
            margin = min(margin, float(np.abs(pre).min()), pool_margin(np.maximum(pre, 0.0)))
        return margin
