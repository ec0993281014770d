"""Joint loss, augmentation and the deterministic training loop."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import SampleRecord, load_sample, split_records
from .graph import NodeLabels, node_labels_for_grid
from .metrics import graph_scores, roc_auc
from .numeric import AdamHyper, Rng, adam_step, bce_with_logits, grad_check
from .sgnn import Model, ModelConfig, ModelOutputs

log = logging.getLogger(__name__)

# child-stream offsets of the root seed
SEED_INIT = 1
SEED_SHUFFLE = 2
SEED_AUGMENT = 3


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    rotate_deg: float = 15.0
    jitter_scale: tuple[float, float] = (0.9, 1.1)
    jitter_shift: tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self) -> None:
        if self.rotate_deg < 0:
            raise ValueError("rotate_deg must be non-negative")
        if not 0 < self.jitter_scale[0] <= self.jitter_scale[1]:
            raise ValueError(f"invalid jitter scale interval {self.jitter_scale}")
        if self.jitter_shift[0] > self.jitter_shift[1]:
            raise ValueError(f"invalid jitter shift interval {self.jitter_shift}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 15
    seed: int = 0
    lambda_node: float = 1.0
    lambda_explain: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    freeze_backbone: bool = False
    label_threshold: float = 0.0

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lambda_node < 0 or self.lambda_explain < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossBreakdown:
    total: float
    graph: float
    node: float
    explain: float
    grad_graph_logit: float
    grad_node_logits: np.ndarray | None
    grad_explain_logits: np.ndarray | None

    def components(self) -> dict[str, float]:
        return {"total": self.total, "graph": self.graph, "node": self.node, "explain": self.explain}


def joint_loss(
    outputs: ModelOutputs,
    graph_label: int,
    node_labels: NodeLabels | np.ndarray | None,
    lambda_node: float = 1.0,
    lambda_explain: float = 1.0,
) -> LossBreakdown:
    """Graph BCE plus weighted node and importance BCE, with logit gradients."""
    graph, g_graph = bce_with_logits(outputs.graph_logit, float(graph_label))
    node = explain = 0.0
    g_node = g_explain = None
    if node_labels is not None:
        labels = node_labels.labels if isinstance(node_labels, NodeLabels) else np.asarray(node_labels, float)
        if labels.shape != outputs.node_logits.shape:
            raise ValueError(f"{labels.size} node labels for {outputs.node_logits.size} nodes")
        node, g_node = bce_with_logits(outputs.node_logits, labels)
        explain, g_explain = bce_with_logits(outputs.explain_logits, labels)
        g_node = lambda_node * g_node
        g_explain = lambda_explain * g_explain
    total = graph + lambda_node * node + lambda_explain * explain
    return LossBreakdown(total, graph, node, explain, float(g_graph[0]), g_node, g_explain)


def total_loss(
    outputs: ModelOutputs,
    graph_label: int,
    node_labels: NodeLabels | np.ndarray | None = None,
    lambda_node: float = 1.0,
    lambda_explain: float = 1.0,
) -> tuple[float, dict[str, float]]:
    b = joint_loss(outputs, graph_label, node_labels, lambda_node, lambda_explain)
    return b.total, b.components()


def loss_and_backward(
    model: Model,
    image: np.ndarray,
    label: int,
    mask: np.ndarray | None,
    lambda_node: float = 1.0,
    lambda_explain: float = 1.0,
    label_threshold: float = 0.0,
    backbone: bool = True,
) -> LossBreakdown:
    """One sample: forward, loss, and gradient accumulation into ``model``."""
    out = model.forward(image)
    labels = None
    if mask is not None:
        labels = node_labels_for_grid(mask, *out.grid_shape, model.config.backbone.downsample, label_threshold)
    b = joint_loss(out, label, labels, lambda_node, lambda_explain)
    model.backward(b.grad_graph_logit, b.grad_node_logits, b.grad_explain_logits, backbone=backbone)
    return b


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0
    shift: float = 0.0


def sample_augment_params(cfg: AugmentConfig, rng: Rng) -> AugmentParams:
    # always four draws, so the stream position does not depend on the outcome
    flip = rng.random() < cfg.flip_prob
    angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg)
    scale = rng.uniform(*cfg.jitter_scale)
    shift = rng.uniform(*cfg.jitter_shift)
    return AugmentParams(flip, angle, scale, shift)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def rotate(img: np.ndarray, angle_deg: float, nearest: bool = False) -> np.ndarray:
    """Rotate about the image centre by inverse mapping; samples outside the frame read 0.

    Rows grow downwards, so a positive angle turns the picture clockwise on screen.
    """
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # output pixel reads the input at the back-rotated coordinate
    sy = c * dy - s * dx + cy
    sx = s * dy + c * dx + cx
    flat = img.reshape(-1, h, w)
    if nearest:
        iy = np.rint(sy).astype(np.int64)
        ix = np.rint(sx).astype(np.int64)
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        out = np.where(ok, flat[:, np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)], 0.0)
        return out.reshape(img.shape)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(flat)
    for oy, wy in ((0, 1.0 - fy), (1, fy)):
        for ox, wx in ((0, 1.0 - fx), (1, fx)):
            py, px = y0 + oy, x0 + ox
            ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
            vals = flat[:, np.clip(py, 0, h - 1), np.clip(px, 0, w - 1)]
            out += np.where(ok, vals, 0.0) * (wy * wx)
    return out.reshape(img.shape)


def apply_augment(
    image: np.ndarray, mask: np.ndarray | None, params: AugmentParams
) -> tuple[np.ndarray, np.ndarray | None]:
    if params.flip:
        image = hflip(image)
        mask = None if mask is None else hflip(mask)
    if params.angle_deg != 0.0:
        image = rotate(image, params.angle_deg)
        mask = None if mask is None else rotate(mask, params.angle_deg, nearest=True)
    image = np.clip(image * params.scale + params.shift, 0.0, 1.0)
    return image, mask


def augment(
    image: np.ndarray, mask: np.ndarray | None, cfg: AugmentConfig, rng: Rng
) -> tuple[np.ndarray, np.ndarray | None]:
    if not cfg.enabled:
        return image, mask
    return apply_augment(image, mask, sample_augment_params(cfg, rng))


# ---------------------------------------------------------------------------
# loop

@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray | None
    label: int


def load_split(records: Sequence[SampleRecord], split: str, size: int) -> list[Sample]:
    out = []
    for r in split_records(list(records), split):
        image, mask = load_sample(r, size)
        out.append(Sample(image, mask, r.label))
    return out


def trainable(model: Model, cfg: TrainConfig) -> list:
    backbone = set(map(id, model.backbone.parameters()))
    return [
        p
        for p in model.parameters()
        if not p.frozen and not (cfg.freeze_backbone and id(p) in backbone)
    ]


def train_epoch(
    model: Model,
    samples: Sequence[Sample],
    cfg: TrainConfig,
    shuffle_rng: Rng,
    augment_rng: Rng,
) -> dict[str, float]:
    """One pass over ``samples``; returns the mean of each loss component."""
    if not samples:
        raise ValueError("cannot train on an empty split")
    params = trainable(model, cfg)
    hyper = AdamHyper(lr=cfg.lr)
    order = shuffle_rng.permutation(len(samples))
    sums = {"total": 0.0, "graph": 0.0, "node": 0.0, "explain": 0.0}
    model.zero_grad()
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        for idx in batch:
            s = samples[idx]
            image, mask = augment(s.image, s.mask, cfg.augment, augment_rng)
            b = loss_and_backward(
                model, image, s.label, mask,
                cfg.lambda_node, cfg.lambda_explain, cfg.label_threshold,
                backbone=not cfg.freeze_backbone,
            )
            for k, v in b.components().items():
                sums[k] += v
        for p in params:
            p.grad /= len(batch)
            adam_step(p, hyper)
        model.zero_grad()
    return {k: v / len(samples) for k, v in sums.items()}


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    graph_loss: float
    node_loss: float
    explain_loss: float
    val_auc: float | None


def fit(
    records: Sequence[SampleRecord],
    cfg: TrainConfig,
    model_config: ModelConfig = ModelConfig(),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Model, list[EpochRecord]]:
    """Train from the seed; return the checkpoint with the best validation AUC and the history.

    Without a usable validation split the final model is returned.
    """
    root = Rng(cfg.seed)
    model = Model(model_config, root.child(SEED_INIT))
    shuffle_rng = root.child(SEED_SHUFFLE)
    augment_rng = root.child(SEED_AUGMENT)
    history: list[EpochRecord] = []
    if cfg.epochs == 0:
        return model, history

    train = load_split(records, "train", model_config.image_size)
    if not train:
        raise ValueError("manifest has no training samples")
    val = load_split(records, "val", model_config.image_size)
    val_labels = [s.label for s in val]
    val_usable = len(set(val_labels)) == 2

    best, best_auc = None, -math.inf
    for epoch in range(1, cfg.epochs + 1):
        stats = train_epoch(model, train, cfg, shuffle_rng, augment_rng)
        auc = None
        if val_usable:
            auc = roc_auc(graph_scores(model, [s.image for s in val]), val_labels).auc
            if auc >= best_auc:
                best_auc, best = auc, copy.deepcopy(model)
        rec = EpochRecord(epoch, stats["total"], stats["graph"], stats["node"], stats["explain"], auc)
        history.append(rec)
        log.info("epoch %d loss %.6f val_auc %s", epoch, rec.loss, auc)
        if on_epoch is not None:
            on_epoch(rec)
    return (best if best is not None else model), history


# ---------------------------------------------------------------------------
# gradient checking on a tiny model

TINY_CONFIG = ModelConfig(image_size=8, blocks=(2,), hidden=6)
KINK_MARGIN = 1e-3


@dataclass
class GradcheckResult:
    max_rel_err: float
    params: int
    attempts: int


def tiny_problem(seed: int, pooling: str = "mean", max_attempts: int = 100):
    """A tiny model plus one (image, mask, label) sample away from ReLU/max-pool kinks.

    Draws are repeated until every pre-activation and every max-pool gap is at
    least ``KINK_MARGIN`` away from a switching point, so central differences see
    a smooth function.
    """
    cfg = ModelConfig(**{**TINY_CONFIG.to_dict(), "pooling": pooling})
    root = Rng(seed)
    s = cfg.image_size
    for attempt in range(1, max_attempts + 1):
        rng = root.child(attempt)
        model = Model(cfg, rng)
        for p in model.parameters():
            if p.name.endswith("bias") or p.name.endswith("beta"):
                p.value[...] = rng.uniform_array(p.value.size, -0.5, 0.5).reshape(p.shape)
            elif p.name.endswith("gamma"):
                p.value[...] = rng.uniform_array(p.value.size, 0.5, 1.5).reshape(p.shape)
        image = rng.uniform_array(s * s).reshape(1, s, s)
        mask = (rng.uniform_array(s * s) < 0.3).astype(np.float64).reshape(s, s)
        label = attempt % 2
        model.forward(image)
        if model.kink_margin() >= KINK_MARGIN:
            return model, image, mask, label, attempt
    raise RuntimeError(f"no kink-free draw in {max_attempts} attempts")


def check_model_gradients(seed: int = 0, eps: float = 1e-5, pooling: str = "mean") -> GradcheckResult:
    model, image, mask, label, attempts = tiny_problem(seed, pooling)
    params = model.parameters()

    def loss_fn() -> float:
        model.zero_grad()
        return loss_and_backward(model, image, label, mask).total

    err = grad_check(loss_fn, params, eps)
    return GradcheckResult(err, sum(p.value.size for p in params), attempts)
