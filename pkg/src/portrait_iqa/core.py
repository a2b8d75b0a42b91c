"""Scene-grouped manifests, scene-disjoint splits and a synthetic scene generator."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MANIFEST_HEADER = ["image_id", "scene_id", "source", "jod_overall"]
OPTIONAL_COLUMNS = ["jod_detail", "jod_exposure"]


class ManifestError(ValueError):
    """Raised when a manifest file or record list violates the manifest contract."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    scene_id: str
    source: str
    jod_overall: float
    jod_detail: float | None = None
    jod_exposure: float | None = None

    def __post_init__(self):
        for name in ("jod_overall", "jod_detail", "jod_exposure"):
            value = getattr(self, name)
            if value is not None and not math.isfinite(value):
                raise ManifestError(f"{self.image_id}: {name} is not finite ({value})")


@dataclass
class Manifest:
    """An ordered list of records; scores are only comparable inside one scene."""

    records: list[ImageRecord]
    scenes: dict[str, list[ImageRecord]] = field(init=False, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[str] = set()
        scenes: dict[str, list[ImageRecord]] = {}
        for rec in self.records:
            if rec.image_id in seen:
                raise ManifestError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            scenes.setdefault(rec.scene_id, []).append(rec)
        small = [s for s, recs in scenes.items() if len(recs) < 2]
        if small:
            raise ManifestError(f"scene {small[0]!r} has fewer than 2 records")
        self.scenes = scenes

    def __len__(self) -> int:
        return len(self.records)

    @property
    def scene_ids(self) -> list[str]:
        return list(self.scenes)

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    def subset(self, scene_ids: Iterable[str]) -> "Manifest":
        keep = set(scene_ids)
        return Manifest([r for r in self.records if r.scene_id in keep])

    def has_optional(self) -> bool:
        return any(r.jod_detail is not None or r.jod_exposure is not None for r in self.records)


@dataclass(frozen=True)
class SplitSpec:
    train_scenes: tuple[str, ...]
    test_scenes: tuple[str, ...]
    seed: int

    def __post_init__(self):
        overlap = set(self.train_scenes) & set(self.test_scenes)
        if overlap:
            raise ValueError(f"scenes on both sides of the split: {sorted(overlap)}")


@dataclass(frozen=True)
class SyntheticConfig:
    n_scenes: int = 8
    images_per_scene: int = 40
    feature_dim: int = 16
    scene_scale_range: tuple[float, float] = (0.5, 3.0)
    scene_shift_range: tuple[float, float] = (-2.0, 2.0)
    noise_sd: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if self.images_per_scene < 2:
            raise ValueError("images_per_scene must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        a_min, a_max = self.scene_scale_range
        if not 0 < a_min <= a_max:
            raise ValueError("scene_scale_range must satisfy 0 < a_min <= a_max")
        b_min, b_max = self.scene_shift_range
        if b_min > b_max:
            raise ValueError("scene_shift_range must satisfy b_min <= b_max")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


class FeatureStore(dict):
    """Read-only-by-convention map image_id -> float64 feature vector."""

    @property
    def dim(self) -> int:
        return len(next(iter(self.values()))) if self else 0

    def matrix(self, image_ids: Iterable[str]) -> np.ndarray:
        ids = list(image_ids)
        missing = [i for i in ids if i not in self]
        if missing:
            raise KeyError(f"no features for image_id {missing[0]!r}")
        return np.stack([self[i] for i in ids]) if ids else np.zeros((0, self.dim))


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ManifestError(f"line {line}: cannot parse {column}={text!r}") from None
    if not math.isfinite(value):
        raise ManifestError(f"line {line}: {column} is not finite")
    return value


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:4] != MANIFEST_HEADER or any(h not in OPTIONAL_COLUMNS for h in header[4:]):
            raise ManifestError(f"{path}: unexpected header {header}")
        records = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            values = dict(zip(header, (c.strip() for c in row)))
            if not values["image_id"] or not values["scene_id"]:
                raise ManifestError(f"line {line}: empty image_id or scene_id")
            extra = {
                col: (_parse_float(values[col], line, col) if values[col] != "" else None)
                for col in header[4:]
            }
            records.append(
                ImageRecord(
                    image_id=values["image_id"],
                    scene_id=values["scene_id"],
                    source=values["source"],
                    jod_overall=_parse_float(values["jod_overall"], line, "jod_overall"),
                    **extra,
                )
            )
    return Manifest(records)


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    header = MANIFEST_HEADER + (OPTIONAL_COLUMNS if manifest.has_optional() else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in manifest.records:
            row = [r.image_id, r.scene_id, r.source, _fmt(r.jod_overall)]
            if len(header) > 4:
                row += [_fmt(r.jod_detail), _fmt(r.jod_exposure)]
            writer.writerow(row)


def load_features(path: str | Path) -> FeatureStore:
    store = FeatureStore()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "image_id":
            raise ManifestError(f"{path}: feature file must start with an image_id column")
        dim = len(header) - 1
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise ManifestError(f"line {line}: expected {dim} features")
            try:
                store[row[0]] = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError:
                raise ManifestError(f"line {line}: non-numeric feature value") from None
    return store


def save_features(store: FeatureStore, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_id"] + [f"f{k}" for k in range(store.dim)])
        for image_id, vec in store.items():
            writer.writerow([image_id] + [repr(float(v)) for v in vec])


def scene_split(manifest: Manifest, test_fraction: float, seed: int) -> SplitSpec:
    """Partition whole scenes into train and test sides.

    The number of test scenes is ``round(n_scenes * test_fraction)`` clamped to
    ``[1, n_scenes - 1]`` so both sides are non-empty.
    """
    scenes = sorted(manifest.scenes)
    if len(scenes) < 2:
        raise ValueError("scene_split needs at least 2 scenes")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = min(max(int(round(len(scenes) * test_fraction)), 1), len(scenes) - 1)
    order = np.random.default_rng(seed).permutation(len(scenes))
    test = sorted(scenes[i] for i in order[:n_test])
    train = sorted(scenes[i] for i in order[n_test:])
    return SplitSpec(tuple(train), tuple(test), seed)


def generate_synthetic(config: SyntheticConfig) -> tuple[Manifest, FeatureStore]:
    """Draw scenes whose JOD scales are independent affine images of a shared latent quality.

    Features are a fixed random projection of ``[u, one_hot(scene)]`` plus
    Gaussian noise, so within a scene the feature vector moves along a single
    direction as the latent quality ``u`` grows.
    """
    rng = np.random.default_rng(config.seed)
    n, m, d = config.n_scenes, config.images_per_scene, config.feature_dim
    projection = rng.standard_normal((d, 1 + n))
    scales = rng.uniform(*config.scene_scale_range, size=n)
    shifts = rng.uniform(*config.scene_shift_range, size=n)
    latent = rng.standard_normal((n, m))
    noise = rng.standard_normal((n, m, d))

    records = []
    store = FeatureStore()
    for s in range(n):
        scene_id = f"scene_{s:03d}"
        onehot = np.zeros(n)
        onehot[s] = 1.0
        for i in range(m):
            image_id = f"s{s:03d}_i{i:03d}"
            u = latent[s, i]
            records.append(
                ImageRecord(image_id, scene_id, f"synthetic:{image_id}", float(scales[s] * u + shifts[s]))
            )
            store[image_id] = projection @ np.concatenate(([u], onehot)) + config.noise_sd * noise[s, i]
    return Manifest(records), store


def latent_direction(config: SyntheticConfig) -> np.ndarray:
    """The feature-space direction of the latent quality used by :func:`generate_synthetic`."""
    rng = np.random.default_rng(config.seed)
    return rng.standard_normal((config.feature_dim, 1 + config.n_scenes))[:, 0]
