"""Confusion matrices, accuracy reports, domain sweeps and prediction overlays.

"Overall accuracy" here is the unweighted mean of the five per-class
recalls; the pixel-weighted accuracy is reported alongside it. Classes with
no ground-truth pixels have an undefined (NaN) recall and are left out of the
mean.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from . import segnet
from .waveform import ModClass, N_CLASSES

CLASS_NAMES = tuple(m.name for m in ModClass)

# colour per class code, used for overlays
PALETTE = np.array([
    (0, 0, 0),          # NoData
    (230, 25, 75),      # BPSK
    (60, 180, 75),      # QPSK
    (0, 130, 200),      # QAM16
    (255, 225, 25),     # QAM64
], dtype=np.uint8)

# published figures, kept for side-by-side reporting only
REFERENCE_CLASS_ACCURACY = {"NoData": 0.980, "BPSK": 0.934, "QPSK": 0.917, "QAM16": 0.640, "QAM64": 0.588,
                            "overall": 0.798}
REFERENCE_DG_ACCURACY = {
    # (experiment, algorithm): (in-domain, out-of-domain)
    ("fft", "erm"): (0.622, 0.459),
    ("fft", "swad"): (0.678, 0.477),
    ("fft", "mldg"): (0.512, 0.477),
    ("cp", "erm"): (0.709, 0.679),
    ("cp", "swad"): (0.744, 0.686),
    ("cp", "mldg"): (0.712, 0.656),
}

FFT_EXPERIMENT_CP = 8
FFT_TRAIN_DOMAINS = (8, 12, 16, 24, 32, 48, 64)
FFT_TEST_GRID = tuple(range(8, 129, 4))
CP_EXPERIMENT_FFT = 32
CP_TRAIN_DOMAINS = tuple(range(0, 9))
CP_TEST_GRID = tuple(range(0, 17))


@dataclass
class EvalReport:
    confusion: np.ndarray                        # (5, 5) rows = truth, cols = prediction
    per_domain: dict = field(default_factory=dict)

    @property
    def n_pixels(self) -> int:
        return int(self.confusion.sum())

    @property
    def recall(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / np.maximum(rows, 1), np.nan)

    @property
    def overall(self) -> float:
        r = self.recall
        return float(np.nanmean(r)) if np.any(~np.isnan(r)) else math.nan

    @property
    def pixel_accuracy(self) -> float:
        n = self.n_pixels
        return float(np.trace(self.confusion) / n) if n else math.nan

    def __add__(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.confusion + other.confusion, {**self.per_domain, **other.per_domain})

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "classes": list(CLASS_NAMES),
            "recall": {n: _nan_to_none(v) for n, v in zip(CLASS_NAMES, self.recall)},
            "overall_class_mean": _nan_to_none(self.overall),
            "pixel_accuracy": _nan_to_none(self.pixel_accuracy),
            "n_pixels": self.n_pixels,
            "per_domain": self.per_domain,
            "reference": REFERENCE_CLASS_ACCURACY,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _nan_to_none(v):
    v = float(v)
    return None if math.isnan(v) else v


def confusion(pred, truth) -> EvalReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    for name, a in (("prediction", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= N_CLASSES):
            raise ValueError(f"{name} holds codes outside 0..{N_CLASSES - 1}")
    idx = truth.astype(np.int64).ravel() * N_CLASSES + pred.astype(np.int64).ravel()
    counts = np.bincount(idx, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)
    return EvalReport(counts)


def evaluate_source(params, source, batch_size: int = 8, limit: int | None = None) -> EvalReport:
    """Confusion over every sample of a source (anything with ``len`` and ``batch``)."""
    n = len(source) if limit is None else min(limit, len(source))
    total = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for lo in range(0, n, batch_size):
        images, masks = source.batch(np.arange(lo, min(lo + batch_size, n)))
        total += confusion(segnet.predict(params, images), masks).confusion
    return EvalReport(total)


@dataclass
class SweepRow:
    domain: str
    value: int
    accuracy: float
    split: str            # "in" or "out"


def domain_partition(values: Sequence[int], train_domains: Sequence[int]) -> tuple[list[int], list[int]]:
    train = set(train_domains)
    return [v for v in values if v in train], [v for v in values if v not in train]


def domain_sweep(params, test_sets: Mapping[int, object], values: Sequence[int], train_domains: Sequence[int],
                 axis: str = "fft", batch_size: int = 8) -> tuple[list[SweepRow], dict]:
    """Overall accuracy per domain value plus in-/out-of-domain means.

    ``test_sets`` maps every value of ``values`` to a source. ``params`` may
    also be a callable ``images -> predicted masks``.
    """
    missing = [v for v in values if v not in test_sets]
    if missing:
        raise ValueError(f"no test set for {axis} values {missing}")
    rows = []
    in_dom = set(train_domains)
    for v in values:
        rep = _evaluate_any(params, test_sets[v], batch_size)
        rows.append(SweepRow(axis, int(v), rep.overall, "in" if v in in_dom else "out"))
    return rows, sweep_summary(rows)


def _evaluate_any(model, source, batch_size: int) -> EvalReport:
    if callable(model):
        total = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        for lo in range(0, len(source), batch_size):
            images, masks = source.batch(np.arange(lo, min(lo + batch_size, len(source))))
            total += confusion(model(images), masks).confusion
        return EvalReport(total)
    return evaluate_source(model, source, batch_size)


def sweep_summary(rows: Sequence[SweepRow]) -> dict:
    def mean(tag):
        vals = [r.accuracy for r in rows if r.split == tag and not math.isnan(r.accuracy)]
        return float(np.mean(vals)) if vals else math.nan
    return {"in_domain": mean("in"), "out_of_domain": mean("out")}


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain", "value", "accuracy", "split"])
        for r in rows:
            w.writerow([r.domain, r.value, repr(float(r.accuracy)), r.split])


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [SweepRow(r["domain"], int(r["value"]), float(r["accuracy"]), r["split"])
                for r in csv.DictReader(fh)]


def overlay(image: np.ndarray, pred: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """(H, W, 3) uint8 blend of the amplitude channel and the class palette."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1:] != pred.shape:
        raise ValueError(f"image {image.shape} and prediction {pred.shape} disagree")
    base = np.repeat(image[2][..., None], 3, axis=2).astype(np.float64)
    colours = PALETTE[pred].astype(np.float64)
    return np.clip(np.floor((1 - alpha) * base + alpha * colours + 0.5), 0, 255).astype(np.uint8)


def infer(params, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted mask (H, W) and colour overlay (H, W, 3) for one (3, 256, W) image.

    ``image`` may be uint8 (scaled by 1/255) or float in [0, 1].
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] != 256 or img.shape[2] < 8:
        raise ValueError(f"expected a 3x256xW image with W >= 8, got {img.shape}")
    x = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    pred = segnet.predict(params, x)[0]
    u8 = img if img.dtype == np.uint8 else np.clip(np.floor(255 * x + 0.5), 0, 255).astype(np.uint8)
    return pred, overlay(u8, pred)


def save_overlay(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb), mode="RGB").save(path, format="PNG")
