"""Patching, class-balancing oversampling, and mixup augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BalanceError, BatchError
from .spectra import Spectrogram

PATCH_SIZE = 128


@dataclass
class Patch:
    data: np.ndarray  # (128, 128)
    label: np.ndarray  # length-C simplex vector
    file_id: str = ""
    index: int = 0

    def hard_label(self) -> int:
        return int(np.argmax(self.label))


@dataclass
class MixupConfig:
    enabled: bool = True
    beta_alpha: float = 0.4
    uniform_share: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.beta_alpha <= 0:
            raise ValueError("beta_alpha must be positive")
        if not 0.0 <= self.uniform_share <= 1.0:
            raise ValueError("uniform_share must be in [0, 1]")


def one_hot(label: int, n_classes: int) -> np.ndarray:
    y = np.zeros(n_classes)
    y[label] = 1.0
    return y


def split_patches(spec: Spectrogram, label: int, n_classes: int) -> list[Patch]:
    """Cut non-overlapped 128-frame patches; the trailing remainder is dropped.

    Spectrograms shorter than one patch are tiled cyclically along time so
    every file contributes at least one patch.
    """
    data = spec.data
    f_bins, t = data.shape
    y = one_hot(label, n_classes)
    if t < PATCH_SIZE:
        reps = -(-PATCH_SIZE // t)
        data = np.tile(data, (1, reps))[:, :PATCH_SIZE]
        t = PATCH_SIZE
    patches = []
    for i in range(t // PATCH_SIZE):
        patches.append(
            Patch(
                data=data[:, i * PATCH_SIZE:(i + 1) * PATCH_SIZE],
                label=y.copy(),
                file_id=spec.source_id,
                index=i,
            )
        )
    return patches


def oversample(patches: list[Patch], seed: int) -> list[Patch]:
    """Balance classes by duplicating minority-class patches (with replacement).

    All original patches are retained; seeded duplicates are appended until
    every class count equals the majority count.
    """
    by_class: dict[int, list[Patch]] = {}
    for p in patches:
        by_class.setdefault(p.hard_label(), []).append(p)
    if not by_class or any(not v for v in by_class.values()):
        raise BalanceError("a class has zero patches")
    majority = max(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    out = list(patches)
    for c in sorted(by_class):
        pool = by_class[c]
        deficit = majority - len(pool)
        if deficit:
            picks = rng.integers(0, len(pool), size=deficit)
            out.extend(pool[i] for i in picks)
    return out


def mixup_batch(batch: list[Patch], cfg: MixupConfig,
                rng: np.random.Generator | None = None) -> list[Patch]:
    """Mix consecutive pairs (1,2),(3,4),... into convex combinations.

    Per pair the coefficient comes from Uniform(0,1) with probability
    cfg.uniform_share, otherwise from Beta(alpha, alpha).
    """
    if len(batch) % 2:
        raise BatchError(f"mixup needs an even batch, got {len(batch)}")
    if not cfg.enabled:
        return list(batch)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out: list[Patch] = []
    for a, b in zip(batch[0::2], batch[1::2]):
        if rng.uniform() < cfg.uniform_share:
            g = rng.uniform()
        else:
            g = rng.beta(cfg.beta_alpha, cfg.beta_alpha)
        if g == 1.0 or g == 0.0:
            first, second = (a, b) if g == 1.0 else (b, a)
            out.append(Patch(first.data.copy(), first.label.copy(),
                             a.file_id, a.index))
            out.append(Patch(second.data.copy(), second.label.copy(),
                             b.file_id, b.index))
            continue
        m1 = a.data * g + b.data * (1 - g)
        y1 = a.label * g + b.label * (1 - g)
        # the complements are taken as (sum - first) so the pair conserves
        # the data and label mass bitwise
        out.append(Patch(m1, y1, a.file_id, a.index))
        out.append(Patch((a.data + b.data) - m1, (a.label + b.label) - y1,
                         b.file_id, b.index))
    return out
