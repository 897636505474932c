"""U-Net over 64-band embedding chips.

Topology for depth D and base width B:

* encoder level l = 0..D: two (3x3 conv -> norm -> ReLU) units at width B*2**l,
  2x2 max-pool between levels; level D is the bottleneck
* decoder level l = D-1..0: nearest 2x upsample, a 3x3 conv unit down to
  B*2**l, concat with the level-l skip (skip first), then two conv units
* head: 1x1 conv to a single logit channel

Spatial dropout follows the two deepest encoder levels, the bottleneck and
the deepest decoder level. Kernels are stored as (kh, kw, C_in, C_out) and
activations are NHWC internally; the public API takes N x C x H x W batches.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..objective import ObjectiveConfig, loss_and_logit_grad
from . import layers as L

NORM_MOMENTUM = 0.1


class ForwardMode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    MC_DROPOUT = "mc_dropout"


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 64
    base_width: int = 32
    depth: int = 3
    dropout_rate: float = 0.2
    norm_enabled: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("in_channels and base_width must be positive")
        if not 1 <= self.depth <= 5:
            raise ValueError("depth must be in [1, 5]")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    def dropout_sites(self) -> list[str]:
        d = self.depth
        enc = [f"enc{l}" for l in (d - 2, d - 1) if l >= 0]
        return enc + [f"enc{d}", f"dec{d - 1}"]


def _conv_units(config: UNetConfig):
    """Yield (name, kernel, c_in, c_out) for every convolution in order."""
    d = config.depth
    for l in range(d + 1):
        cin = config.in_channels if l == 0 else config.width(l - 1)
        yield f"enc{l}.conv1", 3, cin, config.width(l)
        yield f"enc{l}.conv2", 3, config.width(l), config.width(l)
    for l in reversed(range(d)):
        c = config.width(l)
        yield f"dec{l}.up", 3, 2 * c, c
        yield f"dec{l}.conv1", 3, 2 * c, c
        yield f"dec{l}.conv2", 3, c, c
    yield "head", 1, config.base_width, 1


@dataclass
class ParameterSet:
    config: UNetConfig
    params: "OrderedDict[str, np.ndarray]"
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.config,
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            OrderedDict((k, v.copy()) for k, v in self.buffers.items()),
        )

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet(
            self.config,
            OrderedDict((k, v.astype(dtype)) for k, v in self.params.items()),
            OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items()),
        )

    def n_scalars(self) -> int:
        return sum(v.size for v in self.params.values())


def init_params(config: UNetConfig, seed: int = 0, dtype=np.float32) -> ParameterSet:
    """He-normal kernels, zero biases, unit norm scale and zero shift."""
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    buffers: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, k, cin, cout in _conv_units(config):
        std = np.sqrt(2.0 / (k * k * cin))
        params[f"{name}.weight"] = (rng.standard_normal((k, k, cin, cout)) * std).astype(dtype)
        params[f"{name}.bias"] = np.zeros(cout, dtype)
        if config.norm_enabled and name != "head":
            params[f"{name}.norm.scale"] = np.ones(cout, dtype)
            params[f"{name}.norm.shift"] = np.zeros(cout, dtype)
            buffers[f"{name}.norm.running_mean"] = np.zeros(cout, dtype)
            buffers[f"{name}.norm.running_var"] = np.ones(cout, dtype)
    return ParameterSet(config, params, buffers)


def count_params(config: UNetConfig) -> int:
    total = 0
    for name, k, cin, cout in _conv_units(config):
        total += k * k * cin * cout + cout
        if config.norm_enabled and name != "head":
            total += 2 * cout
    return total


def _make_rngs(rng_seed, n):
    if rng_seed is None:
        return None
    if np.ndim(rng_seed) == 0:
        return np.random.default_rng(int(rng_seed))
    if len(rng_seed) != n:
        raise ValueError(f"got {len(rng_seed)} per-sample seeds for a batch of {n}")
    return [np.random.default_rng(int(s)) for s in rng_seed]


class _Net:
    """One forward evaluation, holding whatever backward needs."""

    def __init__(self, ps: ParameterSet, mode: ForwardMode, rng_seed, check_finite: bool):
        self.ps = ps
        self.cfg = ps.config
        self.mode = ForwardMode(mode)
        self.check_finite = check_finite
        self.caches: dict[str, object] = {}
        self.batch_stats: dict[str, tuple] = {}
        self.rng_seed = rng_seed
        self.rngs = None

    def _check(self, name, a):
        if self.check_finite and not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite activation at {name}")

    def _unit(self, x, name):
        p = self.ps.params
        h, c_conv = L.conv3x3_forward(x, p[f"{name}.weight"], p[f"{name}.bias"])
        c_norm = None
        if self.cfg.norm_enabled:
            b = self.ps.buffers
            h, c_norm, stats = L.norm_forward(
                h,
                p[f"{name}.norm.scale"],
                p[f"{name}.norm.shift"],
                b[f"{name}.norm.running_mean"],
                b[f"{name}.norm.running_var"],
                use_batch_stats=self.mode is ForwardMode.TRAIN,
            )
            if stats is not None:
                self.batch_stats[name] = stats
        h, c_relu = L.relu_forward(h)
        self._check(name, h)
        self.caches[name] = (c_conv, c_norm, c_relu)
        return h

    def _unit_back(self, dh, name, grads, need_dx=True):
        c_conv, c_norm, c_relu = self.caches[name]
        dh = L.relu_backward(dh, c_relu)
        if c_norm is not None:
            dh, grads[f"{name}.norm.scale"], grads[f"{name}.norm.shift"] = L.norm_backward(dh, c_norm)
        dx, grads[f"{name}.weight"], grads[f"{name}.bias"] = L.conv3x3_backward(dh, c_conv, need_dx)
        return dx

    def _dropout(self, h, site):
        rate = self.cfg.dropout_rate
        if self.mode is ForwardMode.EVAL or rate == 0:
            return h
        if self.rngs is None:
            self.rngs = _make_rngs(self.rng_seed, h.shape[0])
            if self.rngs is None:
                raise ValueError(f"{self.mode.value} forward needs an rng_seed")
        h, self.caches[f"{site}.drop"] = L.spatial_dropout_forward(h, rate, self.rngs)
        return h

    def _dropout_back(self, dh, site):
        mask = self.caches.get(f"{site}.drop")
        return dh if mask is None else L.spatial_dropout_backward(dh, mask)

    def forward(self, x_nchw, repeat=1):
        cfg = self.cfg
        d = cfg.depth
        n, c, hh, ww = x_nchw.shape
        if c != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {c}")
        if hh % 2**d or ww % 2**d:
            raise ValueError(f"spatial size {hh}x{ww} not divisible by 2**{d}; pad first")
        sites = set(cfg.dropout_sites())
        h = np.ascontiguousarray(x_nchw.transpose(0, 2, 3, 1), dtype=self.ps.dtype)
        self.skip_widths = []
        skips = []
        first_site = max(d - 2, 0)
        for l in range(d + 1):
            h = self._unit(h, f"enc{l}.conv1")
            h = self._unit(h, f"enc{l}.conv2")
            if l == first_site and repeat > 1:
                # everything above the first dropout site is shared by all copies
                h = np.repeat(h, repeat, axis=0)
                skips = [np.repeat(s, repeat, axis=0) for s in skips]
            if f"enc{l}" in sites:
                h = self._dropout(h, f"enc{l}")
            if l < d:
                skips.append(h)
                h, self.caches[f"enc{l}.pool"] = L.maxpool2_forward(h)
        for l in reversed(range(d)):
            h, _ = L.upsample2_forward(h)
            h = self._unit(h, f"dec{l}.up")
            h = np.concatenate([skips[l], h], axis=-1)
            h = self._unit(h, f"dec{l}.conv1")
            h = self._unit(h, f"dec{l}.conv2")
            if f"dec{l}" in sites:
                h = self._dropout(h, f"dec{l}")
        p = self.ps.params
        out, self.caches["head"] = L.conv1x1_forward(h, p["head.weight"], p["head.bias"])
        self._check("head", out)
        return out[..., 0]

    def backward(self, dlogits):
        cfg = self.cfg
        d = cfg.depth
        sites = set(cfg.dropout_sites())
        grads: dict[str, np.ndarray] = {}
        dh, grads["head.weight"], grads["head.bias"] = L.conv1x1_backward(
            dlogits[..., None].astype(self.ps.dtype), self.caches["head"]
        )
        dskips = [None] * d
        for l in range(d):
            if f"dec{l}" in sites:
                dh = self._dropout_back(dh, f"dec{l}")
            dh = self._unit_back(dh, f"dec{l}.conv2", grads)
            dh = self._unit_back(dh, f"dec{l}.conv1", grads)
            c = cfg.width(l)
            dskips[l], dh = dh[..., :c], dh[..., c:]
            dh = self._unit_back(dh, f"dec{l}.up", grads)
            dh = L.upsample2_backward(dh)
        for l in reversed(range(d + 1)):
            if l < d:
                dh = L.maxpool2_backward(dh, self.caches[f"enc{l}.pool"]) + dskips[l]
            if f"enc{l}" in sites:
                dh = self._dropout_back(dh, f"enc{l}")
            dh = self._unit_back(dh, f"enc{l}.conv2", grads)
            dh = self._unit_back(dh, f"enc{l}.conv1", grads, need_dx=l > 0)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {k}")
        return OrderedDict((k, grads[k]) for k in self.ps.params)


def forward(params: ParameterSet, x, mode=ForwardMode.EVAL, rng_seed=None, check_finite=True):
    """Per-pixel logits (N x H x W) for a batch ``x`` of shape N x C x H x W.

    ``rng_seed`` drives dropout in train and mc_dropout modes: either one
    integer for the batch, or a sequence with one seed per sample.
    """
    return _Net(params, mode, rng_seed, check_finite).forward(np.asarray(x))


def forward_repeated(params: ParameterSet, x, seeds, mode=ForwardMode.MC_DROPOUT, check_finite=True):
    """Logits for ``len(seeds)`` stochastic copies of a single-sample batch ``x``.

    The layers ahead of the first dropout site are evaluated once and shared.
    """
    x = np.asarray(x)
    if x.shape[0] != 1:
        raise ValueError("forward_repeated takes a batch of one chip")
    if ForwardMode(mode) is ForwardMode.TRAIN:
        raise ValueError("train mode uses batch statistics; repeated copies would change them")
    return _Net(params, mode, list(seeds), check_finite).forward(x, repeat=len(seeds))


def forward_backward(
    params: ParameterSet,
    x,
    y,
    m,
    objective: ObjectiveConfig = ObjectiveConfig(),
    rng_seed=None,
    mode=ForwardMode.TRAIN,
):
    """Loss, loss components, gradients and the batch normalisation statistics."""
    net = _Net(params, mode, rng_seed, check_finite=True)
    z = net.forward(np.asarray(x))
    loss, parts, dz = loss_and_logit_grad(z, y, m, objective)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    grads = net.backward(dz)
    return loss, parts, grads, net.batch_stats


def backward(params, batch, labels, valid_masks, objective_config=ObjectiveConfig(), rng_seed=None,
             mode=ForwardMode.TRAIN):
    """Return ``(loss, gradients)`` of the total objective for one batch."""
    loss, _, grads, _ = forward_backward(params, batch, labels, valid_masks, objective_config, rng_seed, mode)
    return loss, grads


def update_running_stats(params: ParameterSet, batch_stats, momentum: float = NORM_MOMENTUM) -> None:
    for name, (mean, var) in batch_stats.items():
        rm = params.buffers[f"{name}.norm.running_mean"]
        rv = params.buffers[f"{name}.norm.running_var"]
        rm *= 1 - momentum
        rm += momentum * mean.astype(rm.dtype)
        rv *= 1 - momentum
        rv += momentum * var.astype(rv.dtype)
