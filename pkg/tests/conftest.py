import numpy as np
import pytest

from aeseg import synthfields as sf
from aeseg.chipdata import ChipClass, EmbeddingChip, LabelMask


def make_chip(h=8, w=8, seed=0, cls=ChipClass.TOMATO, invalid_frac=0.0, chip_id="c0"):
    rng = np.random.default_rng(seed)
    valid = rng.random((h, w)) >= invalid_frac
    bands = rng.uniform(-1, 1, (64, h, w)).astype(np.float32)
    bands[:, ~valid] = 0
    labels = np.where(valid, int(cls), 0).astype(np.uint8)
    return EmbeddingChip(bands, valid, chip_id, ChipClass(cls), (0.0, 0.0)), LabelMask(labels, valid)


def synth_pairs(n, prefix, seed=0, size=16):
    cfg = sf.SynthConfig(chip_height=size, chip_width=size, edge_mix_width=1, margin_width=1, noise_sigma=0.2, seed=seed)
    pair = sf.make_signature_pair(seed, 1.0, 0.2)
    out = []
    for i in range(n):
        zones = sf.generate_field_mask(cfg, seed=1000 * seed + i)
        out.append(sf.synthesize_chip(pair, zones, ChipClass(i % 2), cfg, 7 + i, f"{prefix}{i}"))
    return out


@pytest.fixture
def chip_factory():
    return make_chip
