"""Synthetic embedding fields with a closed-form Bayes accuracy.

Two 64-d class signatures are separated by a known Euclidean distance and
observed under isotropic Gaussian noise, so the optimal per-pixel accuracy is
``Phi(d / 2 sigma)``. Field chips get an irregular blob footprint, a ring of
mixed edge pixels and a NoData frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist

import numpy as np
from scipy import ndimage

from .chipdata import (
    N_BANDS,
    ChipClass,
    DatasetManifest,
    EmbeddingChip,
    LabelMask,
    ManifestEntry,
    write_chip,
    write_manifest,
)

SIGNATURE_BOUND = 0.8
MAX_MASK_TRIES = 200


class Zone(enum.IntEnum):
    MARGIN = 0
    EDGE = 1
    INTERIOR = 2


@dataclass(frozen=True)
class SignaturePair:
    mu_tomato: np.ndarray
    mu_other: np.ndarray
    noise_sigma: float
    separation: float

    def signature(self, cls: ChipClass) -> np.ndarray:
        return self.mu_tomato if cls == ChipClass.TOMATO else self.mu_other


@dataclass(frozen=True)
class SynthConfig:
    chip_height: int = 64
    chip_width: int = 64
    edge_mix_width: int = 2
    margin_width: int = 2
    field_irregularity: float = 0.5
    noise_sigma: float = 0.25
    separation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.chip_height < 16 or self.chip_width < 16:
            raise ValueError("chip dimensions must be at least 16")
        if not 0 <= self.edge_mix_width < min(self.chip_height, self.chip_width) / 4:
            raise ValueError("edge_mix_width must be in [0, min(H, W)/4)")
        if self.margin_width < 0:
            raise ValueError("margin_width must be non-negative")
        if not 0.0 <= self.field_irregularity <= 1.0:
            raise ValueError("field_irregularity must be in [0, 1]")
        if self.noise_sigma < 0 or self.separation < 0:
            raise ValueError("noise_sigma and separation must be non-negative")


def make_signature_pair(seed: int, separation: float, noise_sigma: float) -> SignaturePair:
    """Draw two class signatures exactly ``separation`` apart inside [-0.8, 0.8]^64."""
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    center = rng.uniform(-SIGNATURE_BOUND / 2, SIGNATURE_BOUND / 2, N_BANDS)
    u = rng.standard_normal(N_BANDS)
    u /= np.linalg.norm(u)
    half = separation / 2
    if half * np.abs(u).max() > SIGNATURE_BOUND:
        # most spread-out direction: every component has magnitude 1/sqrt(64)
        u = rng.choice([-1.0, 1.0], N_BANDS) / np.sqrt(N_BANDS)
        if half * np.abs(u).max() > SIGNATURE_BOUND:
            raise ValueError(f"separation {separation} does not fit inside the component bounds")
    room = SIGNATURE_BOUND - half * np.abs(u)
    with np.errstate(divide="ignore"):
        t = np.min(np.where(center != 0, room / np.abs(center), np.inf))
    center = center * min(1.0, t)
    return SignaturePair(center + half * u, center - half * u, float(noise_sigma), float(separation))


def bayes_accuracy(pair: SignaturePair) -> float:
    """Optimal per-pixel accuracy for equal priors and isotropic noise (clamping ignored)."""
    d = float(np.linalg.norm(pair.mu_tomato - pair.mu_other))
    if pair.noise_sigma == 0:
        return 1.0 if d > 0 else 0.5
    return NormalDist().cdf(d / (2 * pair.noise_sigma))


def _blob(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = config.chip_height, config.chip_width
    occupancy = rng.uniform(0.35, 0.70)
    aspect = rng.uniform(0.6, 1.6)
    area = occupancy * h * w
    half_w = 0.5 * np.sqrt(area * aspect * w / h)
    half_h = 0.25 * area / half_w
    cy = (h - 1) / 2 + rng.uniform(-0.05, 0.05) * h
    cx = (w - 1) / 2 + rng.uniform(-0.05, 0.05) * w

    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    radial = np.ones_like(theta)
    if config.field_irregularity > 0:
        harmonics = np.arange(2, 8)
        amps = rng.uniform(0.0, 0.35, harmonics.size) / np.sqrt(harmonics - 1)
        phases = rng.uniform(0, 2 * np.pi, harmonics.size)
        wobble = sum(a * np.cos(k * theta + p) for k, a, p in zip(harmonics, amps, phases))
        radial = np.maximum(1.0 + config.field_irregularity * wobble, 0.2)
    return (np.abs(dx) <= half_w * radial) & (np.abs(dy) <= half_h * radial)


def generate_field_mask(config: SynthConfig, seed: int) -> np.ndarray:
    """Map each pixel to a :class:`Zone`.

    The interior is one connected blob covering 30-80% of the chip. The edge
    band is the ring of width ``edge_mix_width`` around it; everything else,
    including a frame of width ``margin_width``, is margin (NoData).
    """
    h, w = config.chip_height, config.chip_width
    e, m = config.edge_mix_width, config.margin_width
    inset = m + e
    box = np.zeros((h, w), dtype=bool)
    box[inset : h - inset, inset : w - inset] = True
    rng = np.random.default_rng(seed)
    for _ in range(MAX_MASK_TRIES):
        interior = _blob(config, rng) & box
        lab, n = ndimage.label(interior)
        if n == 0:
            continue
        if n > 1:
            sizes = ndimage.sum(interior, lab, index=np.arange(1, n + 1))
            interior = lab == (1 + int(np.argmax(sizes)))
        if 0.30 <= interior.mean() <= 0.80:
            break
    else:
        raise RuntimeError(f"could not draw a field mask with 30-80% occupancy in {MAX_MASK_TRIES} tries")

    zones = np.full((h, w), Zone.MARGIN, dtype=np.int8)
    if e > 0:
        ring = ndimage.binary_dilation(interior, structure=np.ones((2 * e + 1, 2 * e + 1), bool))
        zones[ring] = Zone.EDGE
    zones[interior] = Zone.INTERIOR
    return zones


def synthesize_chip(
    pair: SignaturePair,
    mask_map: np.ndarray,
    class_label: ChipClass,
    config: SynthConfig,
    seed: int,
    chip_id: str = "",
    centroid=(0.0, 0.0),
) -> tuple[EmbeddingChip, LabelMask]:
    class_label = ChipClass(class_label)
    h, w = mask_map.shape
    if (h, w) != (config.chip_height, config.chip_width):
        raise ValueError("mask map does not match the configured chip size")
    rng = np.random.default_rng(seed)
    own = pair.signature(class_label)
    other = pair.signature(ChipClass(1 - class_label))

    alpha = rng.uniform(0.5, 1.0, (h, w))
    alpha = np.where(mask_map == Zone.EDGE, alpha, 1.0)
    mean = alpha[None] * own[:, None, None] + (1 - alpha[None]) * other[:, None, None]
    noise = rng.standard_normal((N_BANDS, h, w)) * pair.noise_sigma
    bands = np.clip(mean + noise, -1.0, 1.0)

    valid = mask_map != Zone.MARGIN
    bands[:, ~valid] = 0.0
    labels = np.where(valid, int(class_label), 0).astype(np.uint8)
    chip = EmbeddingChip(bands.astype(np.float32), valid, chip_id, class_label, tuple(centroid))
    return chip, LabelMask(labels, valid)


def generate_dataset(
    out_dir,
    n_chips: int,
    config: SynthConfig,
    region_extent: float = 100_000.0,
) -> tuple[DatasetManifest, SignaturePair]:
    """Write ``n_chips`` balanced AECHIP1 files plus ``manifest.tsv`` under ``out_dir``.

    Centroids are uniform over a square of side ``region_extent`` metres.
    """
    if n_chips < 1:
        raise ValueError("n_chips must be positive")
    out = Path(out_dir)
    (out / "chips").mkdir(parents=True, exist_ok=True)
    seed = config.seed
    pair = make_signature_pair(seed, config.separation, config.noise_sigma)
    rng = np.random.default_rng([seed, 1])
    classes = rng.permutation(np.arange(n_chips) % 2)
    centroids = rng.uniform(0.0, region_extent, (n_chips, 2))

    width = max(4, len(str(n_chips - 1)))
    entries = []
    for i in range(n_chips):
        chip_id = f"chip{i:0{width}d}"
        cls = ChipClass(int(classes[i]))
        zones = generate_field_mask(config, seed=_child_seed(seed, i, 0))
        chip, labels = synthesize_chip(
            pair, zones, cls, config, _child_seed(seed, i, 1), chip_id, centroids[i]
        )
        rel = f"chips/{chip_id}.aechip"
        write_chip(chip, labels, out / rel)
        x, y = (round(float(v), 2) for v in centroids[i])
        entries.append(ManifestEntry(chip_id, rel, cls, (x, y)))
    manifest = DatasetManifest(entries, generator_seed=seed)
    write_manifest(manifest, out / "manifest.tsv")
    return manifest, pair


def _child_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, index, stream]).generate_state(1)[0])
