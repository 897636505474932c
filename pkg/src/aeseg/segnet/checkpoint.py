"""AEUNET1 checkpoint files.

Layout (little-endian): magic ``AEUNET1\\0``; config as u32 in_channels,
u32 base_width, u32 depth, f64 dropout_rate, u8 norm_enabled, 3 pad bytes;
u32 tensor count; then per tensor u32 name length, UTF-8 name, u32 rank,
rank x u32 dims, binary32 payload. Parameters come first, followed by the
running normalisation statistics (names ending in ``running_mean`` /
``running_var``).
"""

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .model import ParameterSet, UNetConfig, init_params

MAGIC = b"AEUNET1\x00"
_CONFIG = struct.Struct("<IIIdB3x")


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParameterSet, destination) -> int:
    cfg = params.config
    out = [MAGIC, _CONFIG.pack(cfg.in_channels, cfg.base_width, cfg.depth, cfg.dropout_rate, int(cfg.norm_enabled))]
    tensors = list(params.params.items()) + list(params.buffers.items())
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(out)
    Path(destination).write_bytes(blob)
    return len(blob)


def load_checkpoint(source, dtype=np.float32) -> ParameterSet:
    data = Path(source).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        cin, base, depth, rate, norm = _CONFIG.unpack_from(data, 8)
        cfg = UNetConfig(cin, base, depth, rate, bool(norm))
        pos = 8 + _CONFIG.size
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise CheckpointError(f"truncated payload for {name}")
            tensors[name] = np.frombuffer(data, "<f4", size, pos).reshape(dims).astype(dtype)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None

    template = init_params(cfg, seed=0, dtype=dtype)
    expected = list(template.params) + list(template.buffers)
    if list(tensors) != expected:
        raise CheckpointError("tensor names do not match the stored configuration")
    for name, arr in tensors.items():
        ref = template.params.get(name, template.buffers.get(name))
        if arr.shape != ref.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {ref.shape}")
    params = OrderedDict((k, tensors[k]) for k in template.params)
    buffers = OrderedDict((k, tensors[k]) for k in template.buffers)
    return ParameterSet(cfg, params, buffers)
