"""Toy-scale quality models sharing one call convention:
``model(x, scene_index=None) -> ModelOutput(score, scene_logits)``."""
from __future__ import annotations

import torch
from torch import nn

from .checkpoint import FORMAT_TAG, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .gated import GatedSceneModel, GateNetwork, SceneRegressorBank, gated_fusion, scene_regressor_bank
from .hyper import (
    FHIQA,
    BackboneOutput,
    HyperIQA,
    HyperNetwork,
    ModelOutput,
    SceneScaleTable,
    SEMHyperIQA,
    TargetParams,
    ToyBackbone,
    fhiqa_rescale,
    scene_classify,
    sem_rescale,
    target_forward,
)
from .monet import MAL, MoNet, SelfAttention, mal_forward, monet_score

MODELS: dict[str, type[nn.Module]] = {
    "hyper": HyperIQA,
    "sem": SEMHyperIQA,
    "fhiqa": FHIQA,
    "monet": MoNet,
    "gated": GatedSceneModel,
}


def build_model(name: str, in_dim: int, n_scenes: int = 1, seed: int | None = None, **dims) -> nn.Module:
    """Instantiate a float64 model; ``seed`` fixes the initial weights."""
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}")
    if seed is not None:
        torch.manual_seed(seed)
    return MODELS[name](in_dim, n_scenes, **dims).to(torch.float64)


def backbone_forward(x: torch.Tensor, backbone: ToyBackbone) -> BackboneOutput:
    return backbone(x)


def hyper_generate(semantic: torch.Tensor, hyper: HyperNetwork) -> TargetParams:
    return hyper(semantic)


__all__ = [
    "FORMAT_TAG", "MAL", "MODELS", "BackboneOutput", "CheckpointError", "FHIQA", "GateNetwork",
    "GatedSceneModel", "HyperIQA", "HyperNetwork", "ModelOutput", "MoNet", "SEMHyperIQA",
    "SceneRegressorBank", "SceneScaleTable", "SelfAttention", "TargetParams", "ToyBackbone",
    "backbone_forward", "build_model", "fhiqa_rescale", "gated_fusion", "hyper_generate",
    "load_checkpoint", "mal_forward", "monet_score", "read_checkpoint", "save_checkpoint",
    "scene_classify", "scene_regressor_bank", "sem_rescale", "target_forward",
]
