"""Mean-opinion network: several multi-view attention blocks each emit an
opinion feature, and one more block fuses them into a score."""
from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .hyper import ModelOutput


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention over the token axis, with residual.

    ``identity_init`` zeroes the output projection so the block is exactly the identity.
    """

    def __init__(self, dim: int, identity_init: bool = False):
        super().__init__()
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)
        if identity_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn = torch.softmax(self.q(x) @ self.k(x).transpose(-1, -2) * self.scale, dim=-1)
        return x + self.out(attn @ self.v(x))


class MAL(nn.Module):
    """Multi-view attention learning block.

    Inputs are ``N`` basic features of shape ``(B, C, D)``. Each gets its own
    self-attention; the results are stacked to ``(B, C, D, N)`` and passed to a
    pixel-wise branch (``C`` tokens of width ``D*N``) and a channel-wise branch
    (``D`` tokens of width ``C*N``). The branch outputs are added and averaged
    over ``C``, giving an opinion feature of length ``D*N``.
    """

    def __init__(self, C: int, D: int, N: int, identity_init: bool = False):
        super().__init__()
        self.C, self.D, self.N = C, D, N
        self.per_input = nn.ModuleList(SelfAttention(D, identity_init) for _ in range(N))
        self.pixel = SelfAttention(D * N, identity_init)
        self.channel = SelfAttention(C * N, identity_init)

    @property
    def out_dim(self) -> int:
        return self.D * self.N

    def stack(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(features) != self.N:
            raise ValueError(f"MAL expects {self.N} basic features, got {len(features)}")
        for f in features:
            if tuple(f.shape[-2:]) != (self.C, self.D):
                raise ValueError(f"basic feature shape {tuple(f.shape[-2:])} != {(self.C, self.D)}")
        return torch.stack([sa(f) for sa, f in zip(self.per_input, features)], dim=-1)

    def channel_branch(self, stacked: torch.Tensor) -> torch.Tensor:
        B = stacked.shape[0]
        tokens = stacked.permute(0, 2, 1, 3).reshape(B, self.D, self.C * self.N)
        out = self.channel(tokens)
        return out.reshape(B, self.D, self.C, self.N).permute(0, 2, 1, 3)

    def pixel_branch(self, stacked: torch.Tensor) -> torch.Tensor:
        B = stacked.shape[0]
        out = self.pixel(stacked.reshape(B, self.C, self.D * self.N))
        return out.reshape(B, self.C, self.D, self.N)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        stacked = self.stack(features)
        fused = self.pixel_branch(stacked) + self.channel_branch(stacked)
        return fused.mean(dim=1).reshape(stacked.shape[0], -1)


def mal_forward(features: Sequence[torch.Tensor], mal: MAL) -> torch.Tensor:
    return mal(features)


class MoNet(nn.Module):
    """Toy MoNet: a linear backbone yields ``N`` multi-level ``C x D`` features,
    ``M`` MALs collect opinions, an aggregation MAL fuses them, and FC heads
    produce the score (``... -> 128 -> 64 -> 1``) and scene logits."""

    name = "monet"

    def __init__(self, in_dim: int, n_scenes: int = 1, C: int = 4, D: int = 8, N: int = 3, M: int = 5):
        super().__init__()
        self.config = dict(in_dim=in_dim, n_scenes=n_scenes, C=C, D=D, N=N, M=M)
        self.in_dim, self.C, self.D, self.N, self.M = in_dim, C, D, N, M
        self.levels = nn.ModuleList(nn.Linear(in_dim, C * D) for _ in range(N))
        self.mals = nn.ModuleList(MAL(C, D, N) for _ in range(M))
        # each opinion (length D*N) is read as N tokens of width D
        self.aggregate = MAL(N, D, M)
        agg_dim = self.aggregate.out_dim
        self.regressor = nn.Sequential(
            nn.Linear(agg_dim, 128), nn.GELU(), nn.Linear(128, 64), nn.GELU(), nn.Linear(64, 1)
        )
        self.scene_head = nn.Linear(agg_dim, n_scenes)

    def basic_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"MoNet input: expected {self.in_dim} features, got {x.shape[-1]}")
        return [torch.tanh(lvl(x)).reshape(-1, self.C, self.D) for lvl in self.levels]

    def opinions(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = self.basic_features(x)
        return [mal(feats) for mal in self.mals]

    def score(self, opinions: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        if len(opinions) != self.M:
            raise ValueError(f"expected {self.M} opinion features, got {len(opinions)}")
        tokens = [o.reshape(-1, self.D, self.N).transpose(1, 2) for o in opinions]
        fused = self.aggregate(tokens)
        return self.regressor(fused).squeeze(-1), self.scene_head(fused)

    def forward(self, x: torch.Tensor, scene_index: torch.Tensor | None = None) -> ModelOutput:
        score, logits = self.score(self.opinions(x))
        return ModelOutput(score, logits)


def monet_score(opinions: Sequence[torch.Tensor], model: MoNet) -> tuple[torch.Tensor, torch.Tensor]:
    """Fuse opinion features into ``(score, scene_probs)``."""
    score, logits = model.score(opinions)
    return score, F.softmax(logits, dim=-1)
