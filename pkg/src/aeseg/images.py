"""Netpbm previews: P5 greyscale maps and P6 pseudo-RGB chip renderings."""

from pathlib import Path

import numpy as np

from .chipdata import EmbeddingChip


def to_u8(values, lo: float, hi: float, valid=None) -> np.ndarray:
    """Linear map of [lo, hi] onto [0, 255], rounded and clipped; invalid pixels become 0."""
    v = (np.asarray(values, dtype=np.float64) - lo) * (255.0 / (hi - lo))
    out = np.clip(np.rint(v), 0, 255).astype(np.uint8)
    if valid is not None:
        out[~np.asarray(valid, dtype=bool)] = 0
    return out


def write_pgm(gray: np.ndarray, destination) -> None:
    h, w = gray.shape
    Path(destination).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + gray.astype(np.uint8).tobytes())


def write_ppm(rgb: np.ndarray, destination) -> None:
    h, w, _ = rgb.shape
    Path(destination).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def read_pnm(source) -> np.ndarray:
    data = Path(source).read_bytes()
    magic, dims, maxval, payload = data.split(b"\n", 3)
    w, h = (int(v) for v in dims.split())
    if int(maxval) != 255:
        raise ValueError("only 8-bit netpbm files are supported")
    if magic == b"P5":
        return np.frombuffer(payload, np.uint8, h * w).reshape(h, w)
    if magic == b"P6":
        return np.frombuffer(payload, np.uint8, h * w * 3).reshape(h, w, 3)
    raise ValueError(f"unsupported netpbm magic {magic!r}")


def render_pseudo_rgb(chip: EmbeddingChip, band_triplet=(0, 1, 2)) -> np.ndarray:
    """Map three embedding bands from [-1, 1] onto 8-bit RGB, for display only."""
    n_bands = chip.bands.shape[0]
    if len(band_triplet) != 3:
        raise ValueError("need exactly three band indices")
    for b in band_triplet:
        if not 0 <= b < n_bands:
            raise ValueError(f"band index {b} out of range for {n_bands} bands")
    return np.stack([to_u8(chip.bands[b], -1.0, 1.0) for b in band_triplet], axis=-1)
