"""Training loop: AdamW updates, per-epoch validation and best-checkpoint retention."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .chipdata import DatasetManifest, load_manifest_chips, pad_batch, padded_size
from .objective import ObjectiveConfig, sigmoid, total_loss
from .segnet import (
    ForwardMode,
    NonFiniteError,
    ParameterSet,
    UNetConfig,
    forward,
    forward_backward,
    init_params,
    update_running_stats,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "epoch",
    "train_loss",
    "val_loss",
    "val_pixel_accuracy",
    "val_precision",
    "val_recall",
    "val_f1",
    "val_iou",
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 24
    epochs: int = 30
    seed: int = 0
    mixed_precision: bool = False  # accepted for compatibility; computation stays float32
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_pixel_accuracy: float
    val_precision: float
    val_recall: float
    val_f1: float
    val_iou: float


class AdamW:
    """Adam moments with weight decay applied directly to the weights.

    Per step: ``w -= lr * wd * w`` then ``w -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """

    def __init__(self, lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, w in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.weight_decay:
                w -= (self.lr * self.weight_decay) * w
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_batches(shapes, batch_size: int, depth: int, order) -> list[list[int]]:
    """Split ``order`` into batches whose chips share one padded size.

    Groups appear in order of first occurrence; the last batch of a group may
    be partial.
    """
    groups: OrderedDict[tuple, list[int]] = OrderedDict()
    for i in order:
        groups.setdefault(padded_size(*shapes[i], depth), []).append(int(i))
    batches = []
    for members in groups.values():
        for s in range(0, len(members), batch_size):
            batches.append(members[s : s + batch_size])
    return batches


def predict_logits(params: ParameterSet, pairs, batch_size: int = 24) -> list[np.ndarray]:
    """Eval-mode logits for each chip, cropped back to the chip's own size."""
    depth = params.config.depth
    shapes = [c.shape for c, _ in pairs]
    out: list = [None] * len(pairs)
    for idx in make_batches(shapes, batch_size, depth, range(len(pairs))):
        x, _, _, sh = pad_batch([pairs[i][0] for i in idx], [pairs[i][1] for i in idx], depth, params.dtype)
        z = forward(params, x, ForwardMode.EVAL)
        for j, i in enumerate(idx):
            h, w = sh[j]
            out[i] = z[j, :h, :w]
    return out


def predict_proba(params: ParameterSet, pairs, batch_size: int = 24) -> list[np.ndarray]:
    return [sigmoid(z.astype(np.float64)) for z in predict_logits(params, pairs, batch_size)]


def _validate(params, pairs, batch_size, objective, threshold=0.5):
    probs = predict_proba(params, pairs, batch_size)
    labels = [lab.labels for _, lab in pairs]
    masks = [c.valid for c, _ in pairs]
    flat = lambda arrs: np.concatenate([a.ravel() for a in arrs])
    loss, _ = total_loss(flat(probs), flat(labels), flat(masks), objective)
    pm = metrics.pixel_metrics(metrics.confusion(probs, labels, masks, threshold))
    return loss, pm


def fit_chips(config: TrainConfig, train_pairs, val_pairs, callback=None):
    """Train on in-memory ``(EmbeddingChip, LabelMask)`` pairs.

    Returns ``(best_params, history)``; ``best_params`` is the epoch with the
    lowest validation loss (earliest on ties).
    """
    if not train_pairs or not val_pairs:
        raise ValueError("empty manifest")
    ids_train = {c.chip_id for c, _ in train_pairs}
    if any(c.chip_id in ids_train and c.chip_id for c, _ in val_pairs):
        raise ValueError("training and validation chips overlap")

    dtype = np.dtype(config.dtype)
    params = init_params(config.unet, _seed(config.seed, 0), dtype)
    opt = AdamW(config.learning_rate, config.weight_decay)
    depth = config.unet.depth
    shapes = [c.shape for c, _ in train_pairs]
    history: list[EpochRecord] = []
    best, best_loss = None, np.inf

    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(_seed(config.seed, 1, epoch)).permutation(len(train_pairs))
        batches = make_batches(shapes, config.batch_size, depth, order)
        total, weight = 0.0, 0
        for b, idx in enumerate(batches):
            x, y, m, _ = pad_batch(
                [train_pairs[i][0] for i in idx], [train_pairs[i][1] for i in idx], depth, dtype
            )
            if not m.any():
                continue
            try:
                loss, _, grads, stats = forward_backward(
                    params, x, y, m, config.objective, rng_seed=_seed(config.seed, 2, epoch, b)
                )
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from None
            opt.step(params.params, grads)
            update_running_stats(params, stats)
            total += loss * len(idx)
            weight += len(idx)
        train_loss = total / max(weight, 1)

        val_loss, pm = _validate(params, val_pairs, config.batch_size, config.objective)
        if not np.isfinite(val_loss):
            raise NonFiniteError(f"epoch {epoch}: non-finite validation loss")
        rec = EpochRecord(epoch, train_loss, val_loss, *(pm[k] for k in ("pixel_accuracy", "precision", "recall", "f1", "iou")))
        history.append(rec)
        log.info("epoch %d train_loss=%.6f val_loss=%.6f val_f1=%.6f", epoch, train_loss, val_loss, rec.val_f1)
        if val_loss < best_loss:
            best_loss, best = val_loss, params.copy()
        if callback is not None:
            callback(rec)
    return best, history


def train(config: TrainConfig, train_manifest: DatasetManifest, val_manifest: DatasetManifest, root="."):
    """Train from manifests whose chip paths are relative to ``root``."""
    if not train_manifest.entries or not val_manifest.entries:
        raise ValueError("empty manifest")
    overlap = {e.chip_id for e in train_manifest.entries} & {e.chip_id for e in val_manifest.entries}
    if overlap:
        raise ValueError(f"manifests share {len(overlap)} chips")
    return fit_chips(config, load_manifest_chips(train_manifest, root), load_manifest_chips(val_manifest, root))


def evaluate_chips(params: ParameterSet, pairs, threshold: float = 0.5, batch_size: int = 24) -> metrics.MetricsReport:
    if not pairs:
        raise ValueError("empty manifest")
    probs = predict_proba(params, pairs, batch_size)
    return metrics.report(probs, [lab.labels for _, lab in pairs], [c.valid for c, _ in pairs], threshold)


def evaluate(params: ParameterSet, manifest: DatasetManifest, threshold: float = 0.5, root=".") -> metrics.MetricsReport:
    if not manifest.entries:
        raise ValueError("empty manifest")
    return evaluate_chips(params, load_manifest_chips(manifest, root), threshold)


def write_history(history, destination) -> None:
    lines = ["\t".join(HISTORY_COLUMNS)]
    for rec in history:
        row = asdict(rec)
        lines.append("\t".join([str(rec.epoch)] + [f"{row[k]:.6f}" for k in HISTORY_COLUMNS[1:]]))
    Path(destination).write_text("\n".join(lines) + "\n")


def read_history(source) -> list[EpochRecord]:
    lines = Path(source).read_text().splitlines()
    if tuple(lines[0].split("\t")) != HISTORY_COLUMNS:
        raise ValueError("unexpected history header")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        out.append(EpochRecord(int(vals[0]), *(float(v) for v in vals[1:])))
    return out
