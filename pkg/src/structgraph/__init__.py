"""Structural graph reasoning over CNN feature maps.

A small conv backbone produces a feature map, every cell becomes a node of a
4-neighbour grid graph carrying its normalised coordinates, two structural
message-passing layers mix appearance with neighbour displacements, and three
heads read the result: per-node lesion probability, per-node importance, and a
graph-level diagnosis.
"""
from .backbone import Backbone, BackboneConfig, FeatureMap
from .graph import NodeLabels, PatchGraph, build_patch_graph, node_labels_from_mask
from .numeric import Param, Rng, adam_step, grad_check
from .sgnn import Model, ModelConfig, ModelOutputs

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "FeatureMap",
    "Model",
    "ModelConfig",
    "ModelOutputs",
    "NodeLabels",
    "Param",
    "PatchGraph",
    "Rng",
    "adam_step",
    "build_patch_graph",
    "grad_check",
    "node_labels_from_mask",
]
