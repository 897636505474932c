"""Input checks for array-level (estimator) entry points."""

import numpy as np

from .chipdata import ChipClass, EmbeddingChip, LabelMask


def check_chip_array(X, n_bands=64, valid=None):
    """Validate an N x C x H x W embedding stack.

    NaN marks NoData; such pixels (and pixels outside ``valid`` if given)
    come back invalid with their bands zeroed. Returns ``(bands, valid)``
    with ``bands`` float32.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected an N x C x H x W array, got shape {X.shape}")
    if X.shape[1] != n_bands:
        raise ValueError(f"expected {n_bands} bands, got {X.shape[1]}")
    if X.shape[2] < 8 or X.shape[3] < 8:
        raise ValueError("chips must be at least 8x8")
    if np.isinf(X).any():
        raise ValueError("infinite band values; mark NoData with NaN instead")
    ok = ~np.isnan(X).any(axis=1)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != ok.shape:
            raise ValueError(f"valid mask shape {valid.shape} does not match {ok.shape}")
        ok &= valid
    bands = np.where(ok[:, None], X, 0.0)
    if np.abs(bands).max(initial=0.0) > 1.0:
        raise ValueError("band values must lie in [-1, 1]")
    return bands.astype(np.float32), ok


def check_label_array(y, valid):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != valid.shape:
        raise ValueError(f"label shape {y.shape} does not match chips {valid.shape}")
    yv = y[valid]
    if not np.isin(yv, (0, 1)).all():
        raise ValueError("labels must be 0 or 1 at valid pixels")
    return np.where(valid, y, 0).astype(np.uint8)


def as_pairs(bands, valid, labels=None, prefix="x"):
    pairs = []
    for i in range(bands.shape[0]):
        lab = np.zeros(valid[i].shape, np.uint8) if labels is None else labels[i]
        v = lab[valid[i]]
        cls = ChipClass(int(v.mean() > 0.5)) if v.size else ChipClass.NON_TOMATO
        chip = EmbeddingChip(bands[i], valid[i], f"{prefix}{i}", cls)
        pairs.append((chip, LabelMask(lab, valid[i])))
    return pairs
