"""Scene-adaptive global/local regression with a learned gate."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .hyper import ModelOutput

SCENARIOS = ("global", "local", "joint")
SCENARIO_PROBS = (0.3, 0.3, 0.4)


class GateNetwork(nn.Module):
    def __init__(self, in_dim: int, hidden: Sequence[int] = (128, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.ReLU()]
            prev = h
        layers.append(nn.Linear(prev, 1))
        self.in_dim = in_dim
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"gate input: expected {self.in_dim}, got {x.shape[-1]}")
        return torch.sigmoid(self.net(x)).squeeze(-1)


def gated_fusion(q_global, q_local, gate_input: torch.Tensor, gate: GateNetwork) -> torch.Tensor:
    """Convex combination ``w * q_local + (1 - w) * q_global`` with ``w = gate(gate_input)``."""
    w = gate(gate_input)
    return w * q_local + (1.0 - w) * q_global


class SceneRegressorBank(nn.Module):
    """One linear regressor per training scene."""

    def __init__(self, emb_dim: int, n_scenes: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_scenes, emb_dim) / emb_dim ** 0.5)
        self.bias = nn.Parameter(torch.zeros(n_scenes))

    @property
    def n_scenes(self) -> int:
        return self.weight.shape[0]

    def all_scenes(self, emb: torch.Tensor) -> torch.Tensor:
        """Every scene's regressor output, shape ``(..., n_scenes)``."""
        return emb @ self.weight.T + self.bias

    def forward(self, emb: torch.Tensor, scene_probs: torch.Tensor | None = None,
                scene_index: torch.Tensor | None = None) -> torch.Tensor:
        if scene_index is not None:
            idx = torch.as_tensor(scene_index)
            if (idx < 0).any() or (idx >= self.n_scenes).any():
                raise ValueError(f"unknown scene index in {idx.tolist()}")
            return (emb * self.weight[idx]).sum(-1) + self.bias[idx]
        if scene_probs is None:
            raise ValueError("test mode needs scene probabilities")
        if scene_probs.shape[-1] != self.n_scenes:
            raise ValueError("scene_probs length does not match the regressor bank")
        return (scene_probs * self.all_scenes(emb)).sum(-1)


def scene_regressor_bank(embedding, scene_probs, bank: SceneRegressorBank, mode: str = "test",
                         scene_index=None) -> torch.Tensor:
    if mode == "train":
        return bank(embedding, scene_index=scene_index)
    if mode == "test":
        return bank(embedding, scene_probs=scene_probs)
    raise ValueError(f"unknown mode {mode!r}")


class GatedSceneModel(nn.Module):
    """Global and local embeddings -> scene-selected regressors -> gated fusion.

    On feature vectors the "local" view is a second learned projection of the
    input, standing in for the face crop.
    """

    name = "gated"

    def __init__(self, in_dim: int, n_scenes: int = 1, emb_dim: int = 16, d_sem: int = 16,
                 gate_hidden: Sequence[int] = (128, 64)):
        super().__init__()
        self.config = dict(in_dim=in_dim, n_scenes=n_scenes, emb_dim=emb_dim, d_sem=d_sem,
                           gate_hidden=list(gate_hidden))
        self.in_dim = in_dim
        self.semantic = nn.Linear(in_dim, d_sem)
        self.scene_head = nn.Linear(d_sem, n_scenes)
        self.global_proj = nn.Linear(in_dim, emb_dim)
        self.local_proj = nn.Linear(in_dim, emb_dim)
        self.global_bank = SceneRegressorBank(emb_dim, n_scenes)
        self.local_bank = SceneRegressorBank(emb_dim, n_scenes)
        self.gate = GateNetwork(2 * emb_dim, gate_hidden)
        self.scenario = "joint"

    def forward(self, x: torch.Tensor, scene_index: torch.Tensor | None = None) -> ModelOutput:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input: expected {self.in_dim} features, got {x.shape[-1]}")
        logits = self.scene_head(torch.tanh(self.semantic(x)))
        g = torch.tanh(self.global_proj(x))
        l = torch.tanh(self.local_proj(x))
        if scene_index is not None:
            qg, ql = self.global_bank(g, scene_index=scene_index), self.local_bank(l, scene_index=scene_index)
        else:
            probs = F.softmax(logits, dim=-1)
            qg, ql = self.global_bank(g, scene_probs=probs), self.local_bank(l, scene_probs=probs)
        if self.scenario == "global":
            return ModelOutput(qg, logits)
        if self.scenario == "local":
            return ModelOutput(ql, logits)
        return ModelOutput(gated_fusion(qg, ql, torch.cat([g, l], dim=-1), self.gate), logits)
