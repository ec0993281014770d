"""Patch-level grid graphs built from feature maps, and node labels from pixel masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeatureMap


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class PatchGraph:
    """Grid graph over feature-map cells.

    Node ``k = i * grid_w + j`` for cell ``(i, j)``. ``edges`` is an ``E x 2`` int
    array of directed ``(src, dst)`` pairs; messages flow from src into dst.
    """

    node_features: np.ndarray  # N x (C + 2)
    coords: np.ndarray  # N x 2, (row, col) in [0, 1]
    edges: np.ndarray  # E x 2
    grid_h: int
    grid_w: int

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.node_features.shape[1] - 2

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.num_nodes)

    def displacement_sums(self) -> np.ndarray:
        """Per node, the sum over in-neighbours j of (c_j - c_i).

        Offsets are summed in integer grid units and scaled once, so the sums
        at interior nodes cancel to exactly zero.
        """
        src, dst = self.edges[:, 0], self.edges[:, 1]
        scale = np.array([self.grid_h - 1, self.grid_w - 1], dtype=np.float64)
        cells = np.rint(self.coords * scale).astype(np.int64)
        steps = np.zeros((self.num_nodes, 2), dtype=np.int64)
        np.add.at(steps, dst, cells[src] - cells[dst])
        return steps / scale

    def permuted(self, perm: np.ndarray) -> "PatchGraph":
        """Same graph with old node ``perm[k]`` moved to position ``k``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        edges = inverse[self.edges]
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        return PatchGraph(self.node_features[perm], self.coords[perm], edges[order], self.grid_h, self.grid_w)


def grid_edges(grid_h: int, grid_w: int) -> np.ndarray:
    """Both directions of every 4-adjacency, sorted by (src, dst)."""
    pairs = []
    for i in range(grid_h):
        for j in range(grid_w):
            k = i * grid_w + j
            # neighbour indices ascend in this order: up, left, right, down
            if i > 0:
                pairs.append((k, k - grid_w))
            if j > 0:
                pairs.append((k, k - 1))
            if j < grid_w - 1:
                pairs.append((k, k + 1))
            if i < grid_h - 1:
                pairs.append((k, k + grid_w))
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def grid_coords(grid_h: int, grid_w: int) -> np.ndarray:
    if grid_h < 2 or grid_w < 2:
        raise GraphError(f"degenerate {grid_h}x{grid_w} grid: normalised coordinates need H, W >= 2")
    rows = np.repeat(np.arange(grid_h) / (grid_h - 1), grid_w)
    cols = np.tile(np.arange(grid_w) / (grid_w - 1), grid_h)
    return np.stack([rows, cols], axis=1)


def build_patch_graph(fm: FeatureMap | np.ndarray) -> PatchGraph:
    feats = fm.tensor if isinstance(fm, FeatureMap) else np.asarray(fm, dtype=np.float64)
    c, h, w = feats.shape
    coords = grid_coords(h, w)
    x = np.concatenate([feats.reshape(c, h * w).T, coords], axis=1)
    return PatchGraph(x, coords, grid_edges(h, w), h, w)


def neighbor_displacement(graph: PatchGraph, edge: tuple[int, int]) -> np.ndarray:
    src, dst = edge
    hit = np.nonzero((graph.edges[:, 0] == src) & (graph.edges[:, 1] == dst))[0]
    if hit.size == 0:
        raise GraphError(f"edge ({src}, {dst}) is not in the graph")
    return graph.coords[dst] - graph.coords[src]


@dataclass(frozen=True)
class NodeLabels:
    labels: np.ndarray  # N, {0, 1}
    coverage: np.ndarray  # N, lesion-pixel fraction per cell


def node_labels_from_mask(mask: np.ndarray, fm: FeatureMap, threshold: float = 0.0) -> NodeLabels:
    """Label a cell positive when its lesion-pixel fraction exceeds ``threshold``."""
    _, gh, gw = fm.shape
    return node_labels_for_grid(mask, gh, gw, fm.downsample, threshold)


def node_labels_for_grid(mask: np.ndarray, gh: int, gw: int, d: int, threshold: float = 0.0) -> NodeLabels:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3:
        mask = mask[0]
    if mask.shape != (gh * d, gw * d):
        raise GraphError(
            f"mask {mask.shape[0]}x{mask.shape[1]} does not align with a {gh}x{gw} grid at stride {d}"
        )
    cells = (mask > 0).reshape(gh, d, gw, d).sum(axis=(1, 3)).reshape(-1)
    coverage = cells / float(d * d)
    return NodeLabels((coverage > threshold).astype(np.float64), coverage)
