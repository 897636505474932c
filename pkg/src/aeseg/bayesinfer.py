"""Monte Carlo dropout inference and edge-versus-interior uncertainty summaries."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .chipdata import CHIP_MAGIC, INVALID_CELL, EmbeddingChip, pad_batch
from .objective import sigmoid
from .segnet import ForwardMode, NonFiniteError, ParameterSet, forward_repeated

VARIANCE_MAX = 0.25
_RASTER_HEADER = struct.Struct("<8sIIIB3x")


@dataclass(frozen=True)
class McConfig:
    passes: int = 100
    base_seed: int = 0
    store_samples: bool = False
    chunk: int = 10  # passes evaluated per forward batch

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be at least 1")
        if self.chunk < 1:
            raise ValueError("chunk must be at least 1")


@dataclass
class UncertaintyMaps:
    mean: np.ndarray
    variance: np.ndarray
    valid: np.ndarray
    samples: np.ndarray | None = None


def pass_seed(base_seed: int, chip_id: str, t: int) -> int:
    """Seed for pass ``t``: first 8 bytes (little-endian) of BLAKE2b over ``"base_seed/chip_id/t"``."""
    digest = hashlib.blake2b(f"{base_seed}/{chip_id}/{t}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def mc_pass_probs(params: ParameterSet, chip: EmbeddingChip, seeds) -> np.ndarray:
    """Probabilities for several dropout passes over one chip, one pass per seed."""
    depth = params.config.depth
    x, _, _, shapes = pad_batch([chip], None, depth, params.dtype)
    h, w = shapes[0]
    z = forward_repeated(params, x, seeds, ForwardMode.MC_DROPOUT)
    p = sigmoid(z[:, :h, :w].astype(np.float64))
    if not np.all(np.isfinite(p)):
        raise NonFiniteError(f"non-finite pass output for chip {chip.chip_id}")
    return p


def mc_predict(params: ParameterSet, chip: EmbeddingChip, mc_config: McConfig = McConfig()) -> UncertaintyMaps:
    """Predictive mean and population variance over ``passes`` dropout passes.

    Chunks of passes are folded into running (count, mean, M2) totals with
    the pairwise merge rule, all in float64.
    """
    T = mc_config.passes
    n = 0
    mean = m2 = None
    stored = []
    for start in range(0, T, mc_config.chunk):
        ts = range(start, min(start + mc_config.chunk, T))
        p = mc_pass_probs(params, chip, [pass_seed(mc_config.base_seed, chip.chip_id, t) for t in ts])
        if mc_config.store_samples:
            stored.append(p)
        k = p.shape[0]
        # shift by the first pass: identical passes then give an exact mean and zero M2
        d = p - p[0]
        dm = d.mean(axis=0)
        cm = p[0] + dm
        cm2 = ((d - dm) ** 2).sum(axis=0)
        if mean is None:
            n, mean, m2 = k, cm, cm2
            continue
        delta = cm - mean
        tot = n + k
        mean = mean + delta * (k / tot)
        m2 = m2 + cm2 + delta**2 * (n * k / tot)
        n = tot
    variance = m2 / T
    mean = np.where(chip.valid, mean, 0.0)
    variance = np.where(chip.valid, variance, 0.0)
    samples = np.concatenate(stored) if stored else None
    return UncertaintyMaps(mean, variance, chip.valid.copy(), samples)


def edge_mask(valid: np.ndarray, labels: np.ndarray, edge_distance: int = 2) -> np.ndarray:
    """Valid pixels within ``edge_distance`` (Chebyshev) of invalid data or a label change.

    Pixels outside the raster count as invalid.
    """
    valid = np.asarray(valid, dtype=bool)
    labels = np.asarray(labels)
    e = int(edge_distance)
    if e <= 0:
        return np.zeros_like(valid)
    square = np.ones((2 * e + 1, 2 * e + 1), dtype=bool)
    padded_invalid = np.pad(~valid, e, constant_values=True)
    near_invalid = ndimage.binary_dilation(padded_invalid, structure=square)[e:-e, e:-e]
    pos = valid & (labels == 1)
    neg = valid & (labels != 1)
    near_pos = ndimage.binary_dilation(pos, structure=square)
    near_neg = ndimage.binary_dilation(neg, structure=square)
    near_label_change = (pos & near_neg) | (neg & near_pos)
    return valid & (near_invalid | near_label_change)


def edge_interior_summary(maps: UncertaintyMaps, labels, valid_mask=None, edge_distance: int = 2) -> dict:
    valid = maps.valid if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    var = np.asarray(maps.variance, dtype=np.float64)
    edge = edge_mask(valid, labels, edge_distance)
    interior = valid & ~edge
    if not interior.any():
        raise ValueError(f"no interior pixels at edge_distance={edge_distance}")
    return {
        "edge_median_var": float(np.median(var[edge])) if edge.any() else float("nan"),
        "interior_median_var": float(np.median(var[interior])),
        "edge_pixel_count": int(edge.sum()),
        "interior_pixel_count": int(interior.sum()),
    }


# -- raster export --------------------------------------------------------------


def write_raster(values: np.ndarray, valid: np.ndarray, destination, class_label: int = 0) -> int:
    """Single-band AECHIP1-layout raster: header with C=1, binary32 values, mask cells."""
    h, w = values.shape
    vals = np.where(valid, values, 0.0).astype("<f4")
    cells = np.where(valid, 0, INVALID_CELL).astype(np.uint8)
    blob = _RASTER_HEADER.pack(CHIP_MAGIC, 1, h, w, int(class_label)) + vals.tobytes() + cells.tobytes()
    Path(destination).write_bytes(blob)
    return len(blob)


def read_raster(source) -> tuple[np.ndarray, np.ndarray]:
    data = Path(source).read_bytes()
    magic, c, h, w, _ = _RASTER_HEADER.unpack_from(data)
    if magic != CHIP_MAGIC:
        raise ValueError("bad magic")
    if c != 1:
        raise ValueError(f"expected a single-band raster, got C={c}")
    if len(data) != _RASTER_HEADER.size + 5 * h * w:
        raise ValueError("truncated payload")
    vals = np.frombuffer(data, "<f4", h * w, _RASTER_HEADER.size).reshape(h, w)
    cells = np.frombuffer(data, np.uint8, h * w, _RASTER_HEADER.size + 4 * h * w).reshape(h, w)
    return vals.astype(np.float32), cells != INVALID_CELL
