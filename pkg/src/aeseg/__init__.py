"""Field-scale crop segmentation on 64-band embedding chips.

A NumPy U-Net trained with a masked BCE + soft Dice objective, Monte Carlo
dropout uncertainty maps, valid-pixel metrics, spatially blocked splits and
a synthetic embedding-field generator with a closed-form Bayes accuracy.
"""

from .chipdata import (
    ChipClass,
    DatasetManifest,
    EmbeddingChip,
    LabelMask,
    ManifestEntry,
    Split,
    read_chip,
    read_manifest,
    spatial_split,
    write_chip,
    write_manifest,
)
from .estimator import UNetSegmenter
from .segnet import ParameterSet, UNetConfig, count_params, init_params

__version__ = "0.1.0"

__all__ = [
    "ChipClass",
    "DatasetManifest",
    "EmbeddingChip",
    "LabelMask",
    "ManifestEntry",
    "ParameterSet",
    "Split",
    "UNetConfig",
    "UNetSegmenter",
    "count_params",
    "init_params",
    "read_chip",
    "read_manifest",
    "spatial_split",
    "write_chip",
    "write_manifest",
]
