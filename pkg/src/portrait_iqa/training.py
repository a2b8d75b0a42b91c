"""Scene-balanced batching, pair/patch sampling, LR schedules and the training loop."""
from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import losses
from .core import FeatureStore, ImageRecord, Manifest
from .models import build_model
from .models.gated import SCENARIO_PROBS, SCENARIOS

log = logging.getLogger(__name__)

LOSSES = ("ssi", "merged", "fidelity", "patch", "huber")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class BatchSpec:
    S: int = 4
    K: int = 32

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")

    @property
    def size(self) -> int:
        return self.S * self.K


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "step"
    base_lr: float = 2e-5
    decay_factor: float = 10.0
    decay_every_epochs: int = 5
    max_lr: float = 1e-4
    min_lr: float = 0.0
    cycle_epochs: int = 30
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.kind == "step":
            if self.base_lr <= 0 or self.decay_every_epochs < 1:
                raise ValueError("step schedule needs base_lr > 0 and decay_every_epochs >= 1")
            if self.decay_factor <= 1:
                raise ValueError("step schedule needs decay_factor > 1")
        elif self.kind == "cosine":
            if self.max_lr <= 0 or self.min_lr < 0 or self.min_lr > self.max_lr:
                raise ValueError("cosine schedule needs 0 <= min_lr <= max_lr, max_lr > 0")
            if self.cycle_epochs < 1 or self.warmup_epochs < 0:
                raise ValueError("cosine schedule needs cycle_epochs >= 1 and warmup_epochs >= 0")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: ScheduleSpec, epoch: float) -> float:
    """Learning rate for a (possibly fractional) epoch.

    Step decay divides ``base_lr`` by ``decay_factor`` every ``decay_every_epochs``.
    Cosine ramps linearly from ``min_lr`` to ``max_lr`` over the warm-up, then
    follows a half cosine down to ``min_lr`` over ``cycle_epochs`` and stays there.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.kind == "step":
        return schedule.base_lr / schedule.decay_factor ** math.floor(epoch / schedule.decay_every_epochs)
    lo, hi = schedule.min_lr, schedule.max_lr
    if epoch < schedule.warmup_epochs:
        return lo + (hi - lo) * epoch / schedule.warmup_epochs
    u = min((epoch - schedule.warmup_epochs) / schedule.cycle_epochs, 1.0)
    if u >= 1.0:
        return lo
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * u))


class SceneGroup(NamedTuple):
    scene_id: str
    image_ids: list[str]


def scene_balanced_batches(manifest: Manifest, spec: BatchSpec, seed: int, epoch: int = 0) -> list[list[SceneGroup]]:
    """One epoch of batches, each holding ``S`` distinct scenes with ``K`` images apiece.

    Scenes are visited in a shuffled order without replacement; if the scene
    count is not a multiple of ``S`` the last batch is topped up with other
    scenes. Scenes holding fewer than ``K`` images contribute all of them plus
    draws with replacement.
    """
    scenes = sorted(manifest.scenes)
    if len(scenes) < spec.S:
        raise ValueError(f"need at least S={spec.S} scenes, manifest has {len(scenes)}")
    rng = np.random.default_rng([seed, epoch])
    order = [scenes[i] for i in rng.permutation(len(scenes))]
    batches = []
    for start in range(0, len(order), spec.S):
        chosen = order[start:start + spec.S]
        if len(chosen) < spec.S:
            pool = [s for s in scenes if s not in chosen]
            extra = rng.choice(len(pool), size=spec.S - len(chosen), replace=False)
            chosen = chosen + [pool[i] for i in sorted(extra)]
        batch = []
        for scene_id in chosen:
            ids = [r.image_id for r in manifest.scenes[scene_id]]
            if len(ids) >= spec.K:
                pick = [ids[i] for i in rng.choice(len(ids), size=spec.K, replace=False)]
            else:
                fill = rng.choice(len(ids), size=spec.K - len(ids), replace=True)
                pick = [ids[i] for i in rng.permutation(len(ids))] + [ids[i] for i in fill]
            batch.append(SceneGroup(scene_id, pick))
        batches.append(batch)
    return batches


def sample_pairs(scene_records: Sequence[ImageRecord], rng: np.random.Generator,
                 n_pairs: int | None = None) -> list[tuple[ImageRecord, ImageRecord]]:
    """Within-scene image pairs.

    With ``n_pairs=None`` every unordered pair is returned once in shuffled order
    with random orientation; otherwise ``n_pairs`` pairs are drawn with replacement.
    """
    if len(scene_records) < 2:
        raise ValueError("a scene needs at least 2 images to form pairs")
    if len({r.scene_id for r in scene_records}) != 1:
        raise ValueError("pairs must come from a single scene")
    all_pairs = list(itertools.combinations(range(len(scene_records)), 2))
    if n_pairs is None:
        picks = rng.permutation(len(all_pairs))
    else:
        picks = rng.integers(len(all_pairs), size=n_pairs)
    out = []
    for p in picks:
        i, j = all_pairs[p]
        if rng.random() < 0.5:
            i, j = j, i
        out.append((scene_records[i], scene_records[j]))
    return out


class Patch(NamedTuple):
    pixels: np.ndarray
    top: int
    left: int
    flipped: bool
    score: float | None


def sample_patches(source: np.ndarray, n: int = 25, size: int = 224, flip_p: float = 0.5,
                   rng: np.random.Generator | None = None, score: float | None = None) -> list[Patch]:
    """Random ``size x size`` crops of an ``H x W [x C]`` array, each flipped
    horizontally with probability ``flip_p``; every patch carries ``score``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng or np.random.default_rng()
    h, w = source.shape[:2]
    if h < size or w < size:
        raise ValueError(f"source {h}x{w} is smaller than patch size {size}")
    patches = []
    for _ in range(n):
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        crop = source[top:top + size, left:left + size]
        flipped = bool(rng.random() < flip_p)
        if flipped:
            crop = crop[:, ::-1]
        patches.append(Patch(np.ascontiguousarray(crop), top, left, flipped, score))
    return patches


@dataclass
class TrainConfig:
    loss: str = "ssi"
    model: str = "hyper"
    batch: BatchSpec = field(default_factory=BatchSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    epochs: int = 100
    seed: int = 0
    fresh_lr_multiplier: float = 10.0
    pretrained_prefixes: tuple[str, ...] = ()
    optimizer: str = "adam"
    weight_decay: float = 0.0
    scene_loss_weight: float = 1.0
    n_patches: int = 25
    patch_jitter: float = 0.05
    huber_delta: float = 0.2
    model_dims: dict = field(default_factory=dict)

    def __post_init__(self):
        from .models import MODELS

        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError("optimizer must be adam or adamw")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    checkpoint_flag: int = 0


@dataclass
class TrainResult:
    model: nn.Module
    history: list[EpochRecord]
    best_epoch: int
    best_loss: float
    scenes: list[str]

    def save_history(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "lr", "checkpoint_flag"])
            for rec in self.history:
                writer.writerow([rec.epoch, repr(rec.loss), repr(rec.lr), rec.checkpoint_flag])


class _BatchLoss:
    """Turns a batch of scene groups into a scalar objective for one loss id."""

    def __init__(self, config: TrainConfig, manifest: Manifest, features: FeatureStore, scenes: list[str]):
        self.config = config
        ids = manifest.image_ids
        self.row = {image_id: k for k, image_id in enumerate(ids)}
        self.x = torch.as_tensor(features.matrix(ids), dtype=torch.float64)
        self.jod = torch.tensor([r.jod_overall for r in manifest.records], dtype=torch.float64)
        scene_index = {s: k for k, s in enumerate(scenes)}
        self.scene_of = torch.tensor([scene_index[r.scene_id] for r in manifest.records])

    def __call__(self, model: nn.Module, batch: list[SceneGroup], gen: torch.Generator) -> torch.Tensor:
        cfg = self.config
        rows = torch.tensor([self.row[i] for g in batch for i in g.image_ids])
        S, K = len(batch), len(batch[0].image_ids)
        x, gt, scene_idx = self.x[rows], self.jod[rows], self.scene_of[rows]

        if cfg.loss == "patch":
            noise = torch.randn((len(rows), cfg.n_patches, x.shape[-1]), generator=gen, dtype=torch.float64)
            views = (x.unsqueeze(1) + cfg.patch_jitter * noise).reshape(-1, x.shape[-1])
            out = model(views, scene_index=scene_idx.repeat_interleave(cfg.n_patches))
            objective = losses.patch_loss(out.score.reshape(len(rows), cfg.n_patches), gt.unsqueeze(-1))
        else:
            out = model(x, scene_index=scene_idx)
            pred = out.score
            if cfg.loss == "ssi":
                objective = losses.ssi_loss(pred.reshape(S, K), gt.reshape(S, K))
            elif cfg.loss == "huber":
                objective = losses.huber_loss(pred, gt, cfg.huber_delta)
            elif cfg.loss == "merged":
                even = K - K % 2
                keep = torch.arange(S * K).reshape(S, K)[:, :even].reshape(-1)
                objective = losses.merged_rank_loss(pred[keep], gt[keep])
            else:
                iu = torch.triu_indices(K, K, offset=1)
                left = (torch.arange(S).unsqueeze(1) * K + iu[0]).reshape(-1)
                right = (torch.arange(S).unsqueeze(1) * K + iu[1]).reshape(-1)
                label = (gt[left] >= gt[right]).to(torch.float64)
                objective = losses.fidelity_loss(pred[left], pred[right], label)
        if out.scene_logits is not None and cfg.scene_loss_weight:
            target = scene_idx if cfg.loss != "patch" else scene_idx.repeat_interleave(cfg.n_patches)
            objective = objective + cfg.scene_loss_weight * F.cross_entropy(out.scene_logits, target)
        return objective


def _param_groups(model: nn.Module, config: TrainConfig) -> list[dict]:
    if not config.pretrained_prefixes:
        return [{"params": list(model.parameters()), "lr_scale": 1.0}]
    pre, fresh = [], []
    for name, p in model.named_parameters():
        (pre if name.startswith(config.pretrained_prefixes) else fresh).append(p)
    groups = [{"params": pre, "lr_scale": 1.0}, {"params": fresh, "lr_scale": config.fresh_lr_multiplier}]
    return [g for g in groups if g["params"]]


def train(config: TrainConfig, manifest: Manifest, features: FeatureStore) -> TrainResult:
    """Fit a model and return the parameters of the lowest-loss epoch.

    The loss recorded for an epoch is the objective re-evaluated on that
    epoch's batches after its updates, i.e. the training loss of exactly the
    parameters a checkpoint at that epoch would hold.
    """
    scenes = sorted(manifest.scenes)
    model = build_model(config.model, in_dim=features.dim, n_scenes=len(scenes), seed=config.seed,
                        **config.model_dims)
    objective = _BatchLoss(config, manifest, features, scenes)
    groups = _param_groups(model, config)
    opt_cls = torch.optim.AdamW if config.optimizer == "adamw" else torch.optim.Adam
    optimizer = opt_cls(groups, lr=lr_at(config.schedule, 0), weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    scenario_rng = np.random.default_rng([config.seed, 1])

    history: list[EpochRecord] = []
    best_loss, best_epoch, best_state = math.inf, -1, None
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch)
        for g in optimizer.param_groups:
            g["lr"] = lr * g["lr_scale"]
        batches = scene_balanced_batches(manifest, config.batch, config.seed, epoch)
        model.train()
        for b, batch in enumerate(batches):
            if hasattr(model, "scenario"):
                model.scenario = SCENARIOS[scenario_rng.choice(len(SCENARIOS), p=SCENARIO_PROBS)]
            loss = objective(model, batch, gen)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b} (lr={lr:g})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

        model.eval()
        if hasattr(model, "scenario"):
            model.scenario = "joint"
        eval_gen = torch.Generator().manual_seed(config.seed * 1_000_003 + epoch)
        with torch.no_grad():
            epoch_loss = float(np.mean([float(objective(model, batch, eval_gen)) for batch in batches]))
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite training loss after epoch {epoch}")
        history.append(EpochRecord(epoch, epoch_loss, lr))
        if epoch_loss < best_loss:
            best_loss, best_epoch = epoch_loss, epoch
            best_state = copy.deepcopy(model.state_dict())
        log.debug("epoch %d loss %.6f lr %.3g", epoch, epoch_loss, lr)

    history[best_epoch].checkpoint_flag = 1
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_loss, scenes)
