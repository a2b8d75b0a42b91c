"""Per-scene rank/linear correlations and the two median aggregation modes.

``srcc`` and ``krcc`` reduce to integer sums before the final square root and
division, so results do not depend on summation order. Degenerate inputs
(a constant side) return ``None`` rather than a number.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median
from typing import Mapping, Sequence

import numpy as np

from .core import Manifest


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("correlation needs at least 2 samples")
    return x, y


def doubled_ranks(x: np.ndarray) -> np.ndarray:
    """Twice the tie-averaged 1-based ranks, as int64 (ranks are multiples of 1/2)."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.int64)
    start = 0
    for end in range(1, x.size + 1):
        if end == x.size or xs[end] != xs[start]:
            # positions start..end-1 (0-based) share rank (start+1 + end)/2
            ranks[order[start:end]] = start + 1 + end
            start = end
    return ranks


def _integer_pearson(a: Sequence[int], b: Sequence[int]) -> float | None:
    n = len(a)
    sa, sb = sum(a), sum(b)
    num = n * sum(i * j for i, j in zip(a, b)) - sa * sb
    da = n * sum(i * i for i in a) - sa * sa
    db = n * sum(j * j for j in b) - sb * sb
    if da == 0 or db == 0:
        return None
    return num / math.sqrt(da * db)


def srcc(x, y) -> float | None:
    x, y = _pair(x, y)
    return _integer_pearson(doubled_ranks(x).tolist(), doubled_ranks(y).tolist())


def plcc(x, y) -> float | None:
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def krcc(x, y) -> float | None:
    """Kendall tau-b."""
    x, y = _pair(x, y)
    iu = np.triu_indices(x.size, k=1)
    sx = np.sign(x[:, None] - x[None, :])[iu]
    sy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = len(sx)
    s = int((sx * sy).sum())
    ties_x = int((sx == 0).sum())
    ties_y = int((sy == 0).sum())
    den = (n0 - ties_x) * (n0 - ties_y)
    if den == 0:
        return None
    return s / math.sqrt(den)


@dataclass
class SceneMetrics:
    scene_id: str
    srcc: float | None
    plcc: float | None
    krcc: float | None
    n: int

    @property
    def defined(self) -> bool:
        return None not in (self.srcc, self.plcc, self.krcc)

    @property
    def average(self) -> float:
        return (self.srcc + self.plcc + self.krcc) / 3.0


@dataclass
class MetricReport:
    per_scene: list[SceneMetrics]
    median_srcc: float | None
    median_plcc: float | None
    median_krcc: float | None
    final_metric: float | None
    excluded_scenes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def r6(v):
            return None if v is None else round(v, 6)

        return {
            "per_scene": [
                {"scene_id": m.scene_id, "srcc": r6(m.srcc), "plcc": r6(m.plcc), "krcc": r6(m.krcc), "n": m.n}
                for m in self.per_scene
            ],
            "median_srcc": r6(self.median_srcc),
            "median_plcc": r6(self.median_plcc),
            "median_krcc": r6(self.median_krcc),
            "final_metric": r6(self.final_metric),
            "excluded_scenes": list(self.excluded_scenes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        return cls(
            per_scene=[SceneMetrics(**m) for m in data["per_scene"]],
            median_srcc=data["median_srcc"],
            median_plcc=data["median_plcc"],
            median_krcc=data["median_krcc"],
            final_metric=data["final_metric"],
            excluded_scenes=list(data.get("excluded_scenes", [])),
        )

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def aggregate(per_scene: Sequence[SceneMetrics]) -> MetricReport:
    """Median of each metric over scenes, and median of the scene-wise averages."""
    usable = [m for m in per_scene if m.defined]
    excluded = [m.scene_id for m in per_scene if not m.defined]

    def med(values):
        return float(median(values)) if values else None

    return MetricReport(
        per_scene=list(per_scene),
        median_srcc=med([m.srcc for m in usable]),
        median_plcc=med([m.plcc for m in usable]),
        median_krcc=med([m.krcc for m in usable]),
        final_metric=med([m.average for m in usable]),
        excluded_scenes=excluded,
    )


def evaluate(predictions: Mapping[str, float], manifest: Manifest) -> MetricReport:
    missing = [r.image_id for r in manifest.records if r.image_id not in predictions]
    if missing:
        raise KeyError(f"no prediction for image_id {missing[0]!r}")
    per_scene = []
    for scene_id in sorted(manifest.scenes):
        recs = manifest.scenes[scene_id]
        pred = [float(predictions[r.image_id]) for r in recs]
        gt = [r.jod_overall for r in recs]
        per_scene.append(SceneMetrics(scene_id, srcc(pred, gt), plcc(pred, gt), krcc(pred, gt), len(recs)))
    return aggregate(per_scene)


def leaderboard(reports: Sequence[tuple[str, MetricReport]]) -> list[tuple[str, MetricReport]]:
    """Sort descending by final metric, ties alphabetically; undefined finals go last."""
    return sorted(
        reports,
        key=lambda item: (item[1].final_metric is None, -(item[1].final_metric or 0.0), item[0]),
    )


def format_leaderboard(ranked: Sequence[tuple[str, MetricReport]]) -> str:
    def f(v):
        return "     n/a" if v is None else f"{v:8.4f}"

    lines = [f"{'rank':>4}  {'name':<24} {'final':>8} {'srcc':>8} {'plcc':>8} {'krcc':>8}"]
    for rank, (name, rep) in enumerate(ranked, start=1):
        lines.append(
            f"{rank:>4}  {name:<24} {f(rep.final_metric)} {f(rep.median_srcc)} "
            f"{f(rep.median_plcc)} {f(rep.median_krcc)}"
        )
    return "\n".join(lines)
