"""Pixel and chip metrics over valid pixels, tomato as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

ROWS = (
    ("pixel_accuracy", "Pixel Accuracy"),
    ("precision", "Precision"),
    ("recall", "Recall"),
    ("f1", "F1 Score"),
    ("iou", "Intersection over Union (IoU)"),
    ("chip_accuracy", "Chip Accuracy"),
)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricsReport:
    pixel_accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float
    chip_accuracy: float
    counts: ConfusionCounts
    n_chips: int

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("counts"))
        return d

    def to_text(self) -> str:
        """Aligned table followed by a key=value block, 6 decimals throughout."""
        width = max(len(label) for _, label in ROWS)
        lines = [f"{'Metric':<{width}}  {'Score':>8}"]
        for key, label in ROWS:
            lines.append(f"{label:<{width}}  {getattr(self, key):>8.6f}")
        lines.append("")
        for key, _ in ROWS:
            lines.append(f"{key}={getattr(self, key):.6f}")
        c = self.counts
        lines += [f"tp={c.tp}", f"fp={c.fp}", f"fn={c.fn}", f"tn={c.tn}", f"n_chips={self.n_chips}"]
        return "\n".join(lines) + "\n"


def _as_list(a):
    if isinstance(a, np.ndarray) and a.ndim == 2:
        return [a]
    return list(a)


def confusion(probs, labels, valid_masks, threshold: float = 0.5) -> ConfusionCounts:
    """Pool confusion counts over chips; a pixel is positive when prob > threshold."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    probs, labels, valid_masks = _as_list(probs), _as_list(labels), _as_list(valid_masks)
    if not len(probs) == len(labels) == len(valid_masks):
        raise ValueError("probability, label and mask lists differ in length")
    tp = fp = fn = tn = 0
    for p, y, m in zip(probs, labels, valid_masks):
        p, y, m = np.asarray(p), np.asarray(y), np.asarray(m, dtype=bool)
        if not p.shape == y.shape == m.shape:
            raise ValueError(f"shape mismatch: {p.shape}, {y.shape}, {m.shape}")
        pred = p[m] > threshold
        truth = y[m] == 1
        tp += int(np.count_nonzero(pred & truth))
        fp += int(np.count_nonzero(pred & ~truth))
        fn += int(np.count_nonzero(~pred & truth))
        tn += int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int, errors: int) -> float:
    # zero denominator: perfect if there was nothing to get wrong
    if den == 0:
        return 1.0 if errors == 0 else 0.0
    return num / den


def pixel_metrics(counts: ConfusionCounts) -> dict:
    if counts.total == 0:
        raise ValueError("no valid pixels to score")
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    precision = _ratio(tp, tp + fp, fp)
    recall = _ratio(tp, tp + fn, fn)
    if precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {
        "pixel_accuracy": (tp + tn) / counts.total,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "iou": _ratio(tp, tp + fp + fn, fp + fn),
    }


def chip_accuracy(mean_probs, labels, valid_masks, threshold: float = 0.5) -> float:
    """Fraction of chips whose valid-pixel mean probability lands on the right side of ``threshold``.

    Each chip must carry a single ground-truth class over its valid pixels.
    """
    mean_probs, labels, valid_masks = _as_list(mean_probs), _as_list(labels), _as_list(valid_masks)
    if not mean_probs:
        raise ValueError("no chips")
    correct = 0
    for p, y, m in zip(mean_probs, labels, valid_masks):
        m = np.asarray(m, dtype=bool)
        if not m.any():
            raise ValueError("chip with zero valid pixels")
        yv = np.asarray(y)[m]
        if np.any(yv != yv[0]):
            raise ValueError("chip is not single-class over its valid pixels")
        predicted = float(np.asarray(p, dtype=np.float64)[m].mean()) > threshold
        correct += predicted == bool(yv[0])
    return correct / len(mean_probs)


def report(probs, labels, valid_masks, threshold: float = 0.5) -> MetricsReport:
    probs, labels, valid_masks = _as_list(probs), _as_list(labels), _as_list(valid_masks)
    counts = confusion(probs, labels, valid_masks, threshold)
    return MetricsReport(
        **pixel_metrics(counts),
        chip_accuracy=chip_accuracy(probs, labels, valid_masks, threshold),
        counts=counts,
        n_chips=len(probs),
    )


def parse_report(text: str) -> dict:
    """Read back the key=value block written by :meth:`MetricsReport.to_text`."""
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            out[key] = float(value) if "." in value else int(value)
    return out
