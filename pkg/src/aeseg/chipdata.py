"""Chip data model, the AECHIP1 container, manifests and spatial splitting."""

from __future__ import annotations

import enum
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

N_BANDS = 64
CHIP_MAGIC = b"AECHIP1\x00"
MANIFEST_HEADER = "AEMANIFEST\t1"
MANIFEST_VERSION = 1
INVALID_CELL = 255

_HEADER = struct.Struct("<8sIIIB3x")  # 24 bytes


class ChipFormatError(ValueError):
    """Raised for malformed chip or manifest files."""


class ChipClass(enum.IntEnum):
    NON_TOMATO = 0
    TOMATO = 1

    @property
    def tag(self) -> str:
        return "tomato" if self is ChipClass.TOMATO else "non_tomato"

    @classmethod
    def from_tag(cls, tag: str) -> "ChipClass":
        try:
            return {"tomato": cls.TOMATO, "non_tomato": cls.NON_TOMATO}[tag]
        except KeyError:
            raise ChipFormatError(f"unknown class tag {tag!r}") from None


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"
    UNASSIGNED = "unassigned"


@dataclass
class EmbeddingChip:
    """A C x H x W embedding raster clipped to one field.

    ``bands`` is stored as float32 so that the on-disk roundtrip is exact.
    Invalid pixels carry band value 0.
    """

    bands: np.ndarray
    valid: np.ndarray
    chip_id: str = ""
    class_label: ChipClass = ChipClass.NON_TOMATO
    centroid: tuple[float, float] = (0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bands.shape[1], self.bands.shape[2]

    def check(self) -> None:
        check_chip(self)


@dataclass
class LabelMask:
    labels: np.ndarray
    valid: np.ndarray


def check_chip(chip: EmbeddingChip, n_bands: int = N_BANDS) -> None:
    bands, valid = chip.bands, chip.valid
    if bands.ndim != 3:
        raise ValueError(f"bands must be C x H x W, got shape {bands.shape}")
    c, h, w = bands.shape
    if c != n_bands:
        raise ValueError(f"expected {n_bands} bands, got {c}")
    if h < 8 or w < 8:
        raise ValueError(f"chip must be at least 8x8, got {h}x{w}")
    if valid.shape != (h, w) or valid.dtype != bool:
        raise ValueError("valid mask must be a boolean H x W array")
    inside = bands[:, valid]
    if not np.all(np.isfinite(inside)):
        raise ValueError("non-finite band value at a valid pixel")
    if inside.size and (inside.min() < -1.0 or inside.max() > 1.0):
        raise ValueError("valid-pixel band values must lie in [-1, 1]")
    if np.any(bands[:, ~valid] != 0):
        raise ValueError("invalid pixels must carry band value 0")


def write_chip(chip: EmbeddingChip, labels: LabelMask, destination) -> int:
    """Write ``chip`` and its labels as an AECHIP1 file; returns bytes written."""
    check_chip(chip)
    c, h, w = chip.bands.shape
    if labels.labels.shape != (h, w):
        raise ValueError("label raster does not match chip dimensions")
    lab = np.asarray(labels.labels)
    if np.any((lab[chip.valid] != 0) & (lab[chip.valid] != 1)):
        raise ValueError("labels must be 0 or 1 at valid pixels")

    cells = np.where(chip.valid, lab, INVALID_CELL).astype(np.uint8)
    header = _HEADER.pack(CHIP_MAGIC, c, h, w, int(chip.class_label))
    payload = np.ascontiguousarray(chip.bands, dtype="<f4").tobytes()
    blob = header + payload + cells.tobytes()
    with open(destination, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_chip(source, chip_id: str | None = None) -> tuple[EmbeddingChip, LabelMask]:
    """Read an AECHIP1 file. NaN band values become invalid pixels with band 0."""
    data = Path(source).read_bytes()
    if len(data) < _HEADER.size:
        raise ChipFormatError("truncated header")
    magic, c, h, w, cls = _HEADER.unpack_from(data)
    if magic != CHIP_MAGIC:
        raise ChipFormatError("bad magic")
    if c != N_BANDS:
        raise ChipFormatError(f"dimension mismatch: C={c}, expected {N_BANDS}")
    if h < 8 or w < 8:
        raise ChipFormatError(f"dimension mismatch: chip {h}x{w} below 8x8")
    if cls not in (0, 1):
        raise ChipFormatError(f"bad class byte {cls}")
    n_vals = c * h * w
    expected = _HEADER.size + 4 * n_vals + h * w
    if len(data) < expected:
        raise ChipFormatError("truncated payload")
    if len(data) > expected:
        raise ChipFormatError("dimension mismatch: trailing bytes after payload")

    bands = np.frombuffer(data, dtype="<f4", count=n_vals, offset=_HEADER.size)
    bands = bands.reshape(c, h, w).astype(np.float32)
    cells = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size + 4 * n_vals)
    cells = cells.reshape(h, w)
    if np.any((cells > 1) & (cells != INVALID_CELL)):
        raise ChipFormatError("mask cells must be 0, 1 or 255")

    valid = (cells != INVALID_CELL) & np.all(np.isfinite(bands), axis=0)
    bands[:, ~valid] = 0.0
    labels = np.where(valid, cells, 0).astype(np.uint8)
    if chip_id is None:
        chip_id = Path(source).stem
    chip = EmbeddingChip(bands, valid, chip_id, ChipClass(cls))
    check_chip(chip)
    return chip, LabelMask(labels, valid)


# -- manifest -----------------------------------------------------------------


@dataclass
class ManifestEntry:
    chip_id: str
    path: str
    class_label: ChipClass
    centroid: tuple[float, float]
    split: Split = Split.UNASSIGNED


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    generator_seed: int = 0
    format_version: int = MANIFEST_VERSION

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.chip_id in seen:
                raise ValueError(f"duplicate chip_id {e.chip_id!r}")
            seen.add(e.chip_id)

    def __len__(self):
        return len(self.entries)

    def subset(self, split: Split | str) -> "DatasetManifest":
        split = Split(split)
        return replace(self, entries=[e for e in self.entries if e.split is split])

    def counts(self) -> dict[Split, int]:
        out = {s: 0 for s in Split}
        for e in self.entries:
            out[e.split] += 1
        return out


def write_manifest(manifest: DatasetManifest, destination) -> None:
    lines = [MANIFEST_HEADER, f"#generator_seed\t{manifest.generator_seed}"]
    for e in manifest.entries:
        x, y = e.centroid
        lines.append(
            "\t".join(
                [e.chip_id, e.path, e.class_label.tag, repr(float(x)), repr(float(y)), e.split.value]
            )
        )
    Path(destination).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(source) -> DatasetManifest:
    text = Path(source).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ChipFormatError("bad manifest header")
    seed = 0
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("\t")
            if key == "generator_seed":
                seed = int(value)
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ChipFormatError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        chip_id, path, cls, x, y, split = parts
        try:
            entries.append(
                ManifestEntry(chip_id, path, ChipClass.from_tag(cls), (float(x), float(y)), Split(split))
            )
        except ValueError as exc:
            raise ChipFormatError(f"line {lineno}: {exc}") from None
    return DatasetManifest(entries, generator_seed=seed)


def load_entry(manifest_dir, entry: ManifestEntry) -> tuple[EmbeddingChip, LabelMask]:
    path = Path(entry.path)
    if not path.is_absolute():
        path = Path(manifest_dir) / path
    chip, labels = read_chip(path, chip_id=entry.chip_id)
    chip.centroid = entry.centroid
    return chip, labels


def load_manifest_chips(manifest: DatasetManifest, manifest_dir) -> list[tuple[EmbeddingChip, LabelMask]]:
    return [load_entry(manifest_dir, e) for e in manifest.entries]


# -- spatial split ------------------------------------------------------------


def block_index(centroid: tuple[float, float], block_size: float) -> tuple[int, int]:
    return math.floor(centroid[0] / block_size), math.floor(centroid[1] / block_size)


def spatial_split(
    manifest: DatasetManifest,
    ratios=(0.70, 0.15, 0.15),
    block_size: float = 5000.0,
    seed: int = 0,
) -> DatasetManifest:
    """Assign whole square blocks of chips to train/val/test.

    Blocks are visited in a seeded random order. Each block goes to the split
    with the largest outstanding deficit, measured against the per-class
    targets for the classes present in the block, so class balance and the
    requested fractions are tracked together.
    """
    if not manifest.entries:
        raise ValueError("empty manifest")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    if not block_size > 0:
        raise ValueError("block_size must be positive")

    blocks: dict[tuple[int, int], list[int]] = {}
    for i, e in enumerate(manifest.entries):
        blocks.setdefault(block_index(e.centroid, block_size), []).append(i)
    if len(blocks) < 3:
        raise ValueError(f"fewer than 3 blocks ({len(blocks)}) at block_size={block_size}")

    keys = sorted(blocks)
    order = np.random.default_rng(seed).permutation(len(keys))

    classes = [e.class_label for e in manifest.entries]
    class_totals = np.array([classes.count(c) for c in ChipClass], dtype=float)
    targets = np.outer(ratios, class_totals)  # split x class
    current = np.zeros_like(targets)
    splits = (Split.TRAIN, Split.VAL, Split.TEST)
    assignment: dict[int, Split] = {}
    for k in order:
        members = blocks[keys[k]]
        comp = np.zeros(len(ChipClass))
        for i in members:
            comp[int(classes[i])] += 1
        score = (targets - current) @ comp
        s = int(np.argmax(score))
        current[s] += comp
        for i in members:
            assignment[i] = splits[s]

    entries = [replace(e, split=assignment[i]) for i, e in enumerate(manifest.entries)]
    return replace(manifest, entries=entries)


# -- batching geometry --------------------------------------------------------


def padded_size(h: int, w: int, depth: int) -> tuple[int, int]:
    m = 2**depth
    return -(-h // m) * m, -(-w // m) * m


def pad_batch(chips, labels, depth: int, dtype=np.float32):
    """Stack chips into rectangular arrays padded with invalid pixels.

    The target size is the batch's maximum H and W rounded up to a multiple of
    ``2**depth``. ``labels`` may be None for unlabeled inference. Returns ``(x, y, m, shapes)`` where ``x`` is N x C x Hp x Wp.
    """
    if not chips:
        raise ValueError("empty batch")
    hmax = max(c.shape[0] for c in chips)
    wmax = max(c.shape[1] for c in chips)
    hp, wp = padded_size(hmax, wmax, depth)
    n, c = len(chips), chips[0].bands.shape[0]
    x = np.zeros((n, c, hp, wp), dtype=dtype)
    y = np.zeros((n, hp, wp), dtype=np.float64)
    m = np.zeros((n, hp, wp), dtype=bool)
    shapes = []
    for i, chip in enumerate(chips):
        h, w = chip.shape
        x[i, :, :h, :w] = chip.bands
        m[i, :h, :w] = chip.valid
        if labels is not None:
            y[i, :h, :w] = np.where(chip.valid, labels[i].labels, 0)
        shapes.append((h, w))
    return x, y, m, shapes


def crop(maps: np.ndarray, shapes) -> list[np.ndarray]:
    return [maps[i, :h, :w] for i, (h, w) in enumerate(shapes)]


def chip_path(root, chip_id: str) -> str:
    return os.path.join(root, f"{chip_id}.aechip")
