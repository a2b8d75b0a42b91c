"""Hypernetwork quality models: a content-conditioned 4-layer target regressor,
plus the scene-rescaled SEM and FHIQA variants."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn


class BackboneOutput(NamedTuple):
    semantic: torch.Tensor
    content: torch.Tensor


class ModelOutput(NamedTuple):
    score: torch.Tensor
    scene_logits: torch.Tensor | None = None


def _check_dim(x: torch.Tensor, dim: int, what: str) -> None:
    if x.shape[-1] != dim:
        raise ValueError(f"{what}: expected last dimension {dim}, got {x.shape[-1]}")


class ToyBackbone(nn.Module):
    """Two-layer perceptron standing in for the pretrained CNN.

    Emits a semantic vector (conditions the hypernetwork) and a content vector
    (input of the target network).
    """

    def __init__(self, in_dim: int, d_sem: int, d_con: int, hidden: int = 32):
        super().__init__()
        self.in_dim = in_dim
        self.trunk = nn.Linear(in_dim, hidden)
        self.semantic = nn.Linear(hidden, d_sem)
        self.content = nn.Linear(hidden, d_con)

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        _check_dim(x, self.in_dim, "backbone input")
        h = torch.tanh(self.trunk(x))
        return BackboneOutput(torch.tanh(self.semantic(h)), torch.tanh(self.content(h)))


@dataclass
class TargetParams:
    """Per-sample weights ``(B, out, in)`` and biases ``(B, out)`` of the 4 target layers."""

    weights: list[torch.Tensor]
    biases: list[torch.Tensor]

    def shapes(self) -> list[tuple[tuple[int, int], int]]:
        return [(tuple(w.shape[-2:]), b.shape[-1]) for w, b in zip(self.weights, self.biases)]

    @classmethod
    def zeros(cls, d_con: int, hidden: Sequence[int], batch: int = 1) -> "TargetParams":
        sizes = [d_con, *hidden, 1]
        return cls(
            [torch.zeros(batch, o, i, dtype=torch.float64) for i, o in zip(sizes[:-1], sizes[1:])],
            [torch.zeros(batch, o, dtype=torch.float64) for o in sizes[1:]],
        )


class HyperNetwork(nn.Module):
    """Maps a semantic vector to the parameters of the target network.

    Three per-position linear layers (1x1 convolutions on a single position)
    feed one weight branch and one bias branch per target layer.
    """

    def __init__(self, d_sem: int, d_con: int, hidden: Sequence[int] = (16, 8, 4), width: int = 32):
        super().__init__()
        if len(hidden) != 3:
            raise ValueError("the target network has exactly 3 hidden layers")
        self.d_sem = d_sem
        self.sizes = [d_con, *hidden, 1]
        self.stack = nn.Sequential(
            nn.Linear(d_sem, width), nn.Tanh(),
            nn.Linear(width, width), nn.Tanh(),
            nn.Linear(width, width), nn.Tanh(),
        )
        self.weight_branches = nn.ModuleList()
        self.bias_branches = nn.ModuleList()
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            wb = nn.Linear(width, fan_out * fan_in)
            # generated weights start near Xavier scale for the target layer
            nn.init.normal_(wb.weight, std=(2.0 / (fan_in + fan_out)) ** 0.5 / width ** 0.5)
            nn.init.normal_(wb.bias, std=(2.0 / (fan_in + fan_out)) ** 0.5)
            self.weight_branches.append(wb)
            self.bias_branches.append(nn.Linear(width, fan_out))

    def forward(self, semantic: torch.Tensor) -> TargetParams:
        _check_dim(semantic, self.d_sem, "hypernetwork input")
        squeeze = semantic.ndim == 1
        h = self.stack(semantic.reshape(-1, self.d_sem))
        weights, biases = [], []
        for (fan_in, fan_out), wb, bb in zip(
            zip(self.sizes[:-1], self.sizes[1:]), self.weight_branches, self.bias_branches
        ):
            weights.append(wb(h).reshape(-1, fan_out, fan_in))
            biases.append(bb(h))
        params = TargetParams(weights, biases)
        if squeeze:
            params = TargetParams([w[0] for w in weights], [b[0] for b in biases])
        return params


def target_forward(content: torch.Tensor, theta: TargetParams) -> torch.Tensor:
    """Run the generated 4-layer regressor: sigmoid on hidden layers, linear output.

    ``content`` is ``(d_con,)`` with unbatched params or ``(B, d_con)`` with
    params batched over ``B``.
    """
    if len(theta.weights) != 4 or len(theta.biases) != 4:
        raise ValueError("target network needs exactly 4 layers")
    h = content
    for k, (w, b) in enumerate(zip(theta.weights, theta.biases)):
        if h.shape[-1] != w.shape[-1]:
            raise ValueError(f"layer {k}: input size {h.shape[-1]} does not match weight {tuple(w.shape)}")
        h = (w @ h.unsqueeze(-1)).squeeze(-1) + b
        if k < 3:
            h = torch.sigmoid(h)
    return h.squeeze(-1)


class SceneScaleTable(nn.Module):
    """Learnable per-scene multiplier and offset, initialised to the identity map."""

    def __init__(self, n_scenes: int):
        super().__init__()
        if n_scenes < 1:
            raise ValueError("scene scale table needs at least one scene")
        self.multiplier = nn.Parameter(torch.ones(n_scenes, dtype=torch.float64))
        self.offset = nn.Parameter(torch.zeros(n_scenes, dtype=torch.float64))

    def __len__(self) -> int:
        return self.multiplier.shape[0]


def scene_classify(semantic: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    _check_dim(semantic, head.in_features, "scene classifier input")
    return F.softmax(head(semantic), dim=-1)


def sem_rescale(pre_score, scene_probs, table: SceneScaleTable) -> torch.Tensor:
    """Affine rescale with the most probable scene's (multiplier, offset).

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest scene.
    """
    if len(table) == 0:
        raise ValueError("empty scene table")
    probs = torch.as_tensor(scene_probs, dtype=torch.float64)
    if probs.shape[-1] != len(table):
        raise ValueError("scene_probs length does not match the table")
    k = torch.argmax(probs, dim=-1)
    pre = torch.as_tensor(pre_score, dtype=torch.float64)
    return table.multiplier[k] * pre + table.offset[k]


def fhiqa_rescale(pre_score, scene_probs, table: SceneScaleTable) -> torch.Tensor:
    """Probability-weighted combination of every scene's affine rescale."""
    probs = torch.as_tensor(scene_probs, dtype=torch.float64)
    if probs.shape[-1] != len(table):
        raise ValueError("scene_probs length does not match the table")
    pre = torch.as_tensor(pre_score, dtype=torch.float64).unsqueeze(-1)
    return (probs * (table.multiplier * pre + table.offset)).sum(dim=-1)


class HyperIQA(nn.Module):
    """Backbone -> hypernetwork -> generated target network."""

    name = "hyper"

    def __init__(self, in_dim: int, n_scenes: int = 1, d_sem: int = 16, d_con: int = 16,
                 hidden: Sequence[int] = (16, 8, 4), width: int = 32):
        super().__init__()
        self.config = dict(in_dim=in_dim, n_scenes=n_scenes, d_sem=d_sem, d_con=d_con,
                           hidden=list(hidden), width=width)
        self.backbone = ToyBackbone(in_dim, d_sem, d_con, hidden=width)
        self.hyper = HyperNetwork(d_sem, d_con, hidden, width)

    def pre_score(self, x: torch.Tensor) -> tuple[torch.Tensor, BackboneOutput]:
        feats = self.backbone(x)
        return target_forward(feats.content, self.hyper(feats.semantic)), feats

    def forward(self, x: torch.Tensor, scene_index: torch.Tensor | None = None) -> ModelOutput:
        score, _ = self.pre_score(x)
        return ModelOutput(score)


class SEMHyperIQA(HyperIQA):
    """HyperIQA with a scene classifier and argmax-scene rescaling.

    During training (``scene_index`` given) the true scene's entry is used.
    """

    name = "sem"

    def __init__(self, in_dim: int, n_scenes: int, **kw):
        super().__init__(in_dim, n_scenes, **kw)
        self.scene_head = nn.Linear(self.config["d_sem"], n_scenes)
        self.table = SceneScaleTable(n_scenes)

    def _rescale(self, pre, probs):
        return sem_rescale(pre, probs, self.table)

    def forward(self, x: torch.Tensor, scene_index: torch.Tensor | None = None) -> ModelOutput:
        pre, feats = self.pre_score(x)
        logits = self.scene_head(feats.semantic)
        if scene_index is not None:
            probs = F.one_hot(scene_index, len(self.table)).to(pre.dtype)
        else:
            probs = F.softmax(logits, dim=-1)
        return ModelOutput(self._rescale(pre, probs), logits)


class FHIQA(SEMHyperIQA):
    """Rescaling weighted by the full predicted scene-probability vector."""

    name = "fhiqa"

    def forward(self, x: torch.Tensor, scene_index: torch.Tensor | None = None) -> ModelOutput:
        pre, feats = self.pre_score(x)
        logits = self.scene_head(feats.semantic)
        return ModelOutput(fhiqa_rescale(pre, F.softmax(logits, dim=-1), self.table), logits)
