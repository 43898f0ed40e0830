"""Patch-to-file posterior aggregation, Mean/Prod/Max late fusion, metrics."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignError, ConfigError, EmptyError, FormatError

log = logging.getLogger("asckit.fusion")

STRATEGIES = ("mean", "prod", "max")
PROD_FLOOR = 1e-12

# spectrogram combinations evaluated alongside the single kinds
COMBINATIONS = [
    ("cqt", "stft"), ("cqt", "gam"), ("cqt", "logmel"), ("cqt", "mfcc"),
    ("cqt", "logmel", "gam"), ("cqt", "gam", "mfcc"),
    ("cqt", "gam", "stft", "mfcc"), ("cqt", "gam", "stft", "logmel"),
    ("cqt", "logmel", "gam", "stft", "mfcc"),
]


@dataclass
class ProbVector:
    probs: np.ndarray
    level: str  # patch | file | fused
    file_id: str = ""
    kinds: tuple = ()


@dataclass
class EvalReport:
    overall: float
    per_class: dict[str, float]
    confusion: list[list[int]]
    categories: list[str]
    per_device: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "overall_accuracy": self.overall,
                "per_class_accuracy": self.per_class,
                "confusion_matrix": self.confusion,
                "categories": self.categories,
                "per_device_accuracy": self.per_device,
            },
            indent=2,
            sort_keys=True,
        )

    def table(self) -> str:
        lines = [f"overall accuracy: {self.overall:.4f}"]
        for name in self.categories:
            lines.append(f"  {name:<20s} {self.per_class[name]:.4f}")
        for dev, acc in sorted(self.per_device.items()):
            lines.append(f"  device {dev:<13s} {acc:.4f}")
        return "\n".join(lines)


def patch_mean(patch_probs: np.ndarray, file_id: str = "",
               kind: str = "") -> ProbVector:
    """File-level posterior: arithmetic mean over the N patch posteriors."""
    patch_probs = np.asarray(patch_probs, dtype=np.float64)
    if patch_probs.ndim != 2 or patch_probs.shape[0] == 0:
        raise EmptyError("patch_mean needs a non-empty N x C matrix")
    return ProbVector(patch_probs.mean(axis=0), "file", file_id, (kind,))


def predict(p: ProbVector) -> int:
    """Argmax category; ties break to the lowest index (and are logged)."""
    probs = np.asarray(p.probs)
    top = int(np.argmax(probs))
    if np.sum(probs == probs[top]) > 1:
        log.info("tie on file %s broken toward index %d", p.file_id, top)
    return top


def fuse(file_probs: np.ndarray, strategy: str, file_id: str = "",
         kinds: tuple = ()) -> ProbVector:
    """Fuse S aligned file-level posteriors (rows) into one vector.

    mean: (1/S) sum; prod: (1/S) prod elementwise (inputs floored at 1e-12);
    max: elementwise maximum.
    """
    rows = np.asarray(file_probs, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise AlignError("fuse needs a non-empty S x C matrix")
    s = rows.shape[0]
    if strategy == "mean":
        fused = rows.mean(axis=0)
    elif strategy == "prod":
        fused = np.prod(np.maximum(rows, PROD_FLOOR), axis=0) / s
    elif strategy == "max":
        fused = rows.max(axis=0)
    else:
        raise ConfigError(f"unknown fusion strategy {strategy!r}")
    return ProbVector(fused, "fused", file_id, kinds)


def build_report(y_true: list[int], y_pred: list[int], categories: list[str],
                 devices: list[str] | None = None) -> EvalReport:
    c = len(categories)
    confusion = np.zeros((c, c), dtype=int)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    counts = confusion.sum(axis=1)
    per_class = {
        categories[i]: (confusion[i, i] / counts[i] if counts[i] else 0.0)
        for i in range(c)
    }
    overall = float(np.trace(confusion) / max(len(y_true), 1))
    per_device: dict[str, float] = {}
    if devices and any(devices):
        groups: dict[str, list[bool]] = {}
        for t, p, d in zip(y_true, y_pred, devices):
            key = "A" if d == "A" else "B&C"
            groups.setdefault(key, []).append(t == p)
        per_device = {k: float(np.mean(v)) for k, v in groups.items()}
    return EvalReport(overall, per_class, confusion.tolist(), categories,
                      per_device)


def evaluate_probs(probs_by_kind: dict[str, dict[str, np.ndarray]],
                   labels: dict[str, int], categories: list[str],
                   kinds: tuple, strategy: str,
                   devices: dict[str, str] | None = None) -> EvalReport:
    """Fuse the given kinds' file posteriors and score against labels."""
    for kind in kinds:
        if kind not in probs_by_kind:
            raise ConfigError(f"no posteriors for kind {kind!r}")
    file_ids = sorted(labels)
    y_true, y_pred, devs = [], [], []
    for fid in file_ids:
        rows = []
        for kind in kinds:
            if fid not in probs_by_kind[kind]:
                raise AlignError(f"kind {kind!r} has no posteriors for {fid}")
            rows.append(probs_by_kind[kind][fid])
        fused = fuse(np.stack(rows), strategy, fid, kinds)
        y_true.append(labels[fid])
        y_pred.append(predict(fused))
        devs.append((devices or {}).get(fid, ""))
    return build_report(y_true, y_pred, categories, devs)


# ---------------------------------------------------------------------------
# Probability CSV round-trip

def dump_probs(rows: list[tuple[str, str, np.ndarray]], path: str) -> None:
    """CSV `file_id,kind,p_0,...,p_{C-1}` at 9-decimal precision."""
    if not rows:
        raise EmptyError("no probability rows to dump")
    c = len(rows[0][2])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file_id", "kind"] + [f"p_{i}" for i in range(c)])
        for fid, kind, probs in rows:
            if len(probs) != c:
                raise FormatError("mixed category counts in one dump")
            writer.writerow([fid, kind] + [f"{p:.9f}" for p in probs])


def load_probs(path: str) -> list[tuple[str, str, np.ndarray]]:
    rows: list[tuple[str, str, np.ndarray]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 3 or header[:2] != ["file_id", "kind"]:
            raise FormatError(f"{path}: bad header")
        c = len(header) - 2
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != c + 2:
                raise FormatError(f"{path}: row {i} has {len(row)} columns, "
                                  f"expected {c + 2}")
            rows.append((row[0], row[1], np.array([float(v) for v in row[2:]])))
    if not rows:
        raise FormatError(f"{path}: no rows")
    return rows
