"""Structural message passing, the three prediction heads, and the full model.

A structural layer updates every node from its own state, the states of its grid
neighbours and the coordinate offsets to those neighbours::

    z_i = W_self h_i + bias + sum_{j in N(i)} (W_neigh h_j + W_delta (c_j - c_i))
    h'_i = LayerNorm(z_i)

Both neighbour sums are linear, so they are formed once per node (``A h`` and
``sum (c_j - c_i)``) before the weight matrices are applied.

Forward passes use the fixed-order :func:`~structgraph.numeric.matmul`; backward
passes use BLAS, which is deterministic for a fixed thread count.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig, FeatureMap
from .graph import PatchGraph, build_patch_graph
from .numeric import (
    LN_EPS,
    Param,
    Rng,
    ShapeError,
    glorot_uniform,
    layer_norm,
    layer_norm_backward,
    matmul,
    sigmoid,
)

POOL_EPS = 1e-8
POOLING_MODES = ("mean", "importance")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    blocks: tuple[int, ...] = (8, 16, 32)
    hidden: int = 64
    pooling: str = "mean"
    inter_layer_relu: bool = False
    # ablation switches: drop the coordinate columns of the node features / the displacement term
    coord_features: bool = True
    use_delta: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.hidden < 1:
            raise ValueError("hidden dimension must be positive")
        bb = self.backbone
        if self.image_size < bb.min_size:
            raise ValueError(f"image_size {self.image_size} below the backbone minimum {bb.min_size}")
        if self.image_size % bb.downsample:
            raise ValueError(f"image_size {self.image_size} not divisible by downsample {bb.downsample}")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.blocks)

    @property
    def grid(self) -> int:
        return self.image_size // self.backbone.downsample

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def neighbor_sum(h: np.ndarray, graph: PatchGraph) -> np.ndarray:
    """Row i is the sum of h_j over in-neighbours j, accumulated in edge order."""
    out = np.zeros_like(h)
    np.add.at(out, graph.edges[:, 1], h[graph.edges[:, 0]])
    return out


def neighbor_sum_transpose(g: np.ndarray, graph: PatchGraph) -> np.ndarray:
    """Adjoint of :func:`neighbor_sum`: scatter each node's gradient back to its sources."""
    out = np.zeros_like(g)
    np.add.at(out, graph.edges[:, 0], g[graph.edges[:, 1]])
    return out


class StructuralLayer:
    def __init__(self, d_in: int, d_out: int, name: str, rng: Rng | None = None, use_delta: bool = True) -> None:
        def init(shape, fan_in, fan_out):
            return glorot_uniform(rng, shape, fan_in, fan_out) if rng is not None else np.zeros(shape)

        self.d_in, self.d_out = d_in, d_out
        self.W_self = Param(f"{name}.W_self", init((d_out, d_in), d_in, d_out))
        self.W_neigh = Param(f"{name}.W_neigh", init((d_out, d_in), d_in, d_out))
        if use_delta:
            self.W_delta = Param(f"{name}.W_delta", init((d_out, 2), 2, d_out))
        else:
            self.W_delta = Param(f"{name}.W_delta", np.zeros((d_out, 2)), frozen=True)
        self.gamma = Param(f"{name}.gamma", np.ones(d_out))
        self.beta = Param(f"{name}.beta", np.zeros(d_out))
        self.bias = Param(f"{name}.bias", np.zeros(d_out))
        self._cache: tuple | None = None

    def parameters(self) -> list[Param]:
        return [self.W_self, self.W_neigh, self.W_delta, self.gamma, self.beta, self.bias]

    def delta_term(self, graph: PatchGraph) -> np.ndarray:
        """The W_delta part of the pre-norm sum, one row per node."""
        return matmul(graph.displacement_sums(), self.W_delta.value.T)

    def pre_norm(self, h: np.ndarray, graph: PatchGraph) -> np.ndarray:
        return self._pre_norm(h, graph)[0]

    def _pre_norm(self, h, graph):
        if h.shape != (graph.num_nodes, self.d_in):
            raise ShapeError(f"layer expects {graph.num_nodes}x{self.d_in} node states, got {h.shape}")
        agg = neighbor_sum(h, graph)
        dsum = graph.displacement_sums()
        z = (
            matmul(h, self.W_self.value.T)
            + self.bias.value
            + matmul(agg, self.W_neigh.value.T)
            + matmul(dsum, self.W_delta.value.T)
        )
        return z, agg, dsum

    def forward(self, h: np.ndarray, graph: PatchGraph) -> np.ndarray:
        z, agg, dsum = self._pre_norm(h, graph)
        self._cache = (h, agg, dsum, z, graph)
        return layer_norm(z, self.gamma.value, self.beta.value, LN_EPS)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        h, agg, dsum, z, graph = self._cache
        dz, dgamma, dbeta = layer_norm_backward(z, self.gamma.value, self.beta.value, LN_EPS, upstream)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        self.bias.grad += dz.sum(axis=0)
        self.W_self.grad += dz.T @ h
        self.W_neigh.grad += dz.T @ agg
        if not self.W_delta.frozen:
            self.W_delta.grad += dz.T @ dsum
        grad_h = dz @ self.W_self.value
        grad_h += neighbor_sum_transpose(dz @ self.W_neigh.value, graph)
        return grad_h


class LinearHead:
    """Per-node scalar logit ``w . h_i + b``."""

    def __init__(self, d: int, name: str, rng: Rng | None = None) -> None:
        w = glorot_uniform(rng, (1, d), d, 1) if rng is not None else np.zeros((1, d))
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(1))
        self._h: np.ndarray | None = None

    def parameters(self) -> list[Param]:
        return [self.weight, self.bias]

    def logits(self, h: np.ndarray) -> np.ndarray:
        self._h = h
        return matmul(h, self.weight.value.T)[:, 0] + self.bias.value[0]

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(h))

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = grad_logits[:, None]
        self.weight.grad += g.T @ self._h
        self.bias.grad += grad_logits.sum(keepdims=True)
        return g @ self.weight.value


class GraphMLP:
    """linear(D -> D) -> ReLU -> linear(D -> 1) on a pooled graph vector."""

    def __init__(self, d: int, name: str, rng: Rng | None = None) -> None:
        def init(shape, fan_in, fan_out):
            return glorot_uniform(rng, shape, fan_in, fan_out) if rng is not None else np.zeros(shape)

        self.fc1_w = Param(f"{name}.fc1.weight", init((d, d), d, d))
        self.fc1_b = Param(f"{name}.fc1.bias", np.zeros(d))
        self.fc2_w = Param(f"{name}.fc2.weight", init((1, d), d, 1))
        self.fc2_b = Param(f"{name}.fc2.bias", np.zeros(1))
        self._cache: tuple | None = None

    def parameters(self) -> list[Param]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def forward(self, pooled: np.ndarray) -> float:
        pre = matmul(pooled[None, :], self.fc1_w.value.T)[0] + self.fc1_b.value
        act = np.maximum(pre, 0.0)
        logit = float(matmul(act[None, :], self.fc2_w.value.T)[0, 0] + self.fc2_b.value[0])
        self._cache = (pooled, pre, act)
        return logit

    def backward(self, grad_logit: float) -> np.ndarray:
        pooled, pre, act = self._cache
        self.fc2_w.grad += grad_logit * act[None, :]
        self.fc2_b.grad += grad_logit
        g_pre = grad_logit * self.fc2_w.value[0] * (pre > 0)
        self.fc1_w.grad += np.outer(g_pre, pooled)
        self.fc1_b.grad += g_pre
        return g_pre @ self.fc1_w.value

    def hidden_margin(self) -> float:
        return float(np.abs(self._cache[1]).min())


def graph_head(mlp: GraphMLP, pooled: np.ndarray) -> tuple[float, float]:
    logit = mlp.forward(pooled)
    return logit, float(sigmoid(logit))


def mean_pool(embeddings: np.ndarray) -> np.ndarray:
    if embeddings.shape[0] == 0:
        raise ShapeError("cannot pool an empty node set")
    return embeddings.sum(axis=0) / embeddings.shape[0]


def importance_weighted_pool(embeddings: np.ndarray, s: np.ndarray) -> np.ndarray:
    return (s[:, None] * embeddings).sum(axis=0) / (s.sum() + POOL_EPS)


@dataclass
class ModelOutputs:
    node_probs: np.ndarray
    importance: np.ndarray
    graph_logit: float
    graph_prob: float
    node_embeddings: np.ndarray
    node_logits: np.ndarray
    explain_logits: np.ndarray
    graph: PatchGraph = field(repr=False)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.graph.grid_h, self.graph.grid_w


class Model:
    def __init__(self, config: ModelConfig = ModelConfig(), rng: Rng | None = None) -> None:
        self.config = config
        dh = config.hidden
        c = config.backbone.out_channels
        self.backbone = Backbone(config.backbone, rng)
        self.layer1 = StructuralLayer(c + 2, dh, "layer1", rng, config.use_delta)
        self.layer2 = StructuralLayer(dh, dh, "layer2", rng, config.use_delta)
        self.node_head = LinearHead(dh, "node_head", rng)
        self.explain_head = LinearHead(dh, "explain_head", rng)
        self.graph_mlp = GraphMLP(dh, "graph_mlp", rng)
        self._cache: dict = {}

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, Rng(seed))

    def parameters(self) -> list[Param]:
        """All parameters in their fixed declared order."""
        return (
            self.backbone.parameters()
            + self.layer1.parameters()
            + self.layer2.parameters()
            + self.node_head.parameters()
            + self.explain_head.parameters()
            + self.graph_mlp.parameters()
        )

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward ---------------------------------------------------------

    def forward(self, image: np.ndarray) -> ModelOutputs:
        fm = self.backbone.forward(image)
        self._cache["from_image"] = True
        return self._forward_features(fm)

    __call__ = forward

    def forward_features(self, fm: FeatureMap | np.ndarray) -> ModelOutputs:
        """Run everything after the backbone; used with externally computed feature maps."""
        if not isinstance(fm, FeatureMap):
            fm = FeatureMap(np.asarray(fm, dtype=np.float64), self.config.backbone.downsample)
        self._cache["from_image"] = False
        return self._forward_features(fm)

    def _forward_features(self, fm: FeatureMap) -> ModelOutputs:
        c = fm.tensor.shape[0]
        if c != self.layer1.d_in - 2:
            raise ShapeError(f"feature map has {c} channels, model expects {self.layer1.d_in - 2}")
        graph = build_patch_graph(fm)
        out = self.forward_graph(graph)
        self._cache["fm_shape"] = fm.tensor.shape
        return out

    def forward_graph(self, graph: PatchGraph) -> ModelOutputs:
        x = graph.node_features
        if not self.config.coord_features:
            x = x.copy()
            x[:, -2:] = 0.0
        h1 = self.layer1.forward(x, graph)
        mid = np.maximum(h1, 0.0) if self.config.inter_layer_relu else h1
        h2 = self.layer2.forward(mid, graph)
        node_logits = self.node_head.logits(h2)
        explain_logits = self.explain_head.logits(h2)
        s = sigmoid(explain_logits)
        if self.config.pooling == "mean":
            pooled = mean_pool(h2)
        else:
            pooled = importance_weighted_pool(h2, s)
        graph_logit = self.graph_mlp.forward(pooled)
        self._cache.update(graph=graph, h1=h1, h2=h2, s=s, pooled=pooled)
        return ModelOutputs(
            node_probs=sigmoid(node_logits),
            importance=s,
            graph_logit=graph_logit,
            graph_prob=float(sigmoid(graph_logit)),
            node_embeddings=h2,
            node_logits=node_logits,
            explain_logits=explain_logits,
            graph=graph,
        )

    # -- backward --------------------------------------------------------

    def backward(
        self,
        grad_graph_logit: float,
        grad_node_logits: np.ndarray | None = None,
        grad_explain_logits: np.ndarray | None = None,
        backbone: bool = True,
    ) -> np.ndarray:
        """Accumulate gradients of the last forward pass into every parameter.

        Returns the gradient w.r.t. the node features fed to the first layer.
        """
        c = self._cache
        h2, s = c["h2"], c["s"]
        n = h2.shape[0]
        g_explain = np.zeros(n) if grad_explain_logits is None else np.array(grad_explain_logits, dtype=np.float64)

        g_pooled = self.graph_mlp.backward(grad_graph_logit)
        if self.config.pooling == "mean":
            g_h2 = np.broadcast_to(g_pooled / n, h2.shape).copy()
        else:
            denom = s.sum() + POOL_EPS
            g_h2 = np.outer(s / denom, g_pooled)
            g_s = (h2 - c["pooled"]) @ g_pooled / denom
            g_explain = g_explain + g_s * s * (1.0 - s)

        if grad_node_logits is not None:
            g_h2 += self.node_head.backward(np.asarray(grad_node_logits, dtype=np.float64))
        g_h2 += self.explain_head.backward(g_explain)

        g_mid = self.layer2.backward(g_h2)
        g_h1 = g_mid * (c["h1"] > 0) if self.config.inter_layer_relu else g_mid
        g_x = self.layer1.backward(g_h1)

        if backbone and c.get("from_image"):
            ch, gh, gw = c["fm_shape"]
            g_fm = g_x[:, :ch].T.reshape(ch, gh, gw)
            self.backbone.backward(g_fm)
        return g_x

    def kink_margin(self) -> float:
        """How close the last forward pass sat to a non-differentiable point."""
        margin = self.graph_mlp.hidden_margin()
        if self._cache.get("from_image"):
            margin = min(margin, self.backbone.activation_margin())
        if self.config.inter_layer_relu:
            margin = min(margin, float(np.abs(self._cache["h1"]).min()))
        return margin

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self.parameters())
