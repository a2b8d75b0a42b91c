"""Scene-relative portrait image quality assessment at desk scale."""
from .core import (
    FeatureStore,
    ImageRecord,
    Manifest,
    ManifestError,
    SplitSpec,
    SyntheticConfig,
    generate_synthetic,
    load_features,
    load_manifest,
    save_features,
    save_manifest,
    scene_split,
)
from .metrics import MetricReport, SceneMetrics, evaluate, krcc, leaderboard, plcc, srcc

__version__ = "0.1.0"
