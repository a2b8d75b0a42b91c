"""Test-time augmentation views, view-averaged prediction and ensembling."""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .core import FeatureStore, Manifest

MODES = ("none", "five-crop", "ten-crop", "rand-k", "corners-center", "dense-patches")
_ALIASES = {"five": "five-crop", "ten": "ten-crop", "rand": "rand-k", "corners": "corners-center",
            "dense": "dense-patches"}
_FIXED_VIEWS = {"none": 1, "five-crop": 5, "ten-crop": 10, "corners-center": 9}


@dataclass(frozen=True)
class TTASpec:
    mode: str = "none"
    k: int = 18
    n: int = 30
    seed: int = 0
    crop_size: int = 224
    jitter_sd: float = 0.05

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown TTA mode {self.mode!r}")
        if self.k < 1 or self.n < 1:
            raise ValueError("k and n must be >= 1")
        if self.crop_size < 1 or self.jitter_sd < 0:
            raise ValueError("crop_size must be >= 1 and jitter_sd >= 0")

    @classmethod
    def parse(cls, text: str, **kw) -> "TTASpec":
        """Parse ``none|five|ten|rand:k|corners|dense:n`` (long mode names also accepted)."""
        name, _, arg = text.partition(":")
        mode = _ALIASES.get(name, name)
        if mode not in MODES:
            raise ValueError(f"unknown TTA mode {text!r}")
        if arg:
            if mode not in ("rand-k", "dense-patches"):
                raise ValueError(f"TTA mode {mode} takes no count")
            try:
                count = int(arg)
            except ValueError:
                raise ValueError(f"bad TTA count in {text!r}") from None
            kw["k" if mode == "rand-k" else "n"] = count
        return cls(mode=mode, **kw)

    @property
    def n_views(self) -> int:
        if self.mode == "rand-k":
            return self.k
        if self.mode == "dense-patches":
            return self.n
        return _FIXED_VIEWS[self.mode]

    def __str__(self) -> str:
        if self.mode == "rand-k":
            return f"rand:{self.k}"
        if self.mode == "dense-patches":
            return f"dense:{self.n}"
        return self.mode


def _grid_shape(n: int, h: int, w: int) -> tuple[int, int]:
    """Factor ``n = rows * cols`` with the aspect ratio closest to the source's."""
    pairs = [(r, n // r) for r in range(1, n + 1) if n % r == 0]
    return min(pairs, key=lambda rc: (abs(np.log(rc[0] / rc[1]) - np.log(h / w)), rc[0]))


def _grid_origins(count: int, span: int) -> list[int]:
    if count == 1:
        return [span // 2]
    stride = -(-span // (count - 1))
    return [min(i * stride, span) for i in range(count)]


def crop_origins(h: int, w: int, size: int, spec: TTASpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    if h < size or w < size:
        raise ValueError(f"source {h}x{w} is smaller than crop size {size}")
    bottom, right = h - size, w - size
    cy, cx = bottom // 2, right // 2
    corners = [(0, 0), (0, right), (bottom, 0), (bottom, right)]
    if spec.mode in ("five-crop", "ten-crop"):
        return corners + [(cy, cx)]
    if spec.mode == "corners-center":
        return corners + [(0, cx), (bottom, cx), (cy, 0), (cy, right), (cy, cx)]
    if spec.mode == "rand-k":
        return [(int(rng.integers(0, bottom + 1)), int(rng.integers(0, right + 1))) for _ in range(spec.k)]
    rows, cols = _grid_shape(spec.n, h, w)
    return [(t, l) for t in _grid_origins(rows, bottom) for l in _grid_origins(cols, right)]


def _view_rng(spec: TTASpec, key: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed, zlib.crc32(key.encode("utf-8"))])


def tta_views(source: np.ndarray, spec: TTASpec, key: str = "") -> list[np.ndarray]:
    """Views of one input for test-time augmentation.

    Arrays with spatial extent (``H x W [x C]``) are cropped; 1-d feature
    vectors have no geometry, so every mode except ``none`` yields the same
    number of seeded Gaussian-jitter copies instead. ``key`` (the image id)
    seeds the per-image draws, so results do not depend on iteration order.
    """
    source = np.asarray(source)
    if spec.mode == "none":
        return [source]
    rng = _view_rng(spec, key)
    if source.ndim == 1:
        noise = rng.standard_normal((spec.n_views, source.size))
        return [source + spec.jitter_sd * z for z in noise]
    size = spec.crop_size
    views = [source[t:t + size, l:l + size] for t, l in crop_origins(*source.shape[:2], size, spec, rng)]
    if spec.mode == "ten-crop":
        views += [v[:, ::-1] for v in views]
    return views


@dataclass
class PredictionSet:
    scores: dict[str, float]
    model_id: str = ""
    tta: str = "none"

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image_id", "score"])
            for image_id, score in self.scores.items():
                writer.writerow([image_id, f"{score:.6f}"])

    @classmethod
    def load(cls, path: str | Path) -> "PredictionSet":
        scores = {}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["image_id", "score"]:
                raise ValueError(f"{path}: expected header image_id,score")
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise ValueError(f"{path} line {line}: expected 2 fields")
                scores[row[0]] = float(row[1])
        return cls(scores)


def predict_views(score_fn: Callable[[list[np.ndarray]], Sequence[float]], source: np.ndarray,
                  spec: TTASpec, key: str = "") -> float:
    """Mean of ``score_fn`` over the TTA views of one source."""
    return float(np.mean(score_fn(tta_views(source, spec, key))))


def predict(model: nn.Module, manifest: Manifest, features: FeatureStore, spec: TTASpec = TTASpec(),
            model_id: str = "") -> PredictionSet:
    """Score every manifest image as the mean of the model's scores over its TTA views."""
    in_dim = model.config["in_dim"]
    missing = [i for i in manifest.image_ids if i not in features]
    if missing:
        raise KeyError(f"no features for image_id {missing[0]!r}")
    if features.dim != in_dim:
        raise ValueError(f"features have dimension {features.dim}, model expects {in_dim}")
    ids = manifest.image_ids
    views = np.stack([v for i in ids for v in tta_views(features[i], spec, i)])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        scores = model(torch.as_tensor(views, dtype=torch.float64)).score.numpy()
    model.train(was_training)
    per_image = scores.reshape(len(ids), spec.n_views).mean(axis=1)
    return PredictionSet({i: float(s) for i, s in zip(ids, per_image)}, model_id, str(spec))


def ensemble_mean(sets: Sequence[PredictionSet]) -> PredictionSet:
    if not sets:
        raise ValueError("nothing to ensemble")
    keys = set(sets[0].scores)
    for s in sets[1:]:
        if set(s.scores) != keys:
            raise ValueError("prediction sets cover different images")
    # fsum is exactly rounded, so the mean does not depend on input order
    scores = {i: math.fsum(s.scores[i] for s in sets) / len(sets) for i in sets[0].scores}
    return PredictionSet(scores, "+".join(s.model_id for s in sets), sets[0].tta)
