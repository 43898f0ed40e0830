"""Patch splitting, oversampling, and mixup tests."""

import numpy as np
import pytest

from asckit.errors import BalanceError, BatchError
from asckit.patchlab import (
    MixupConfig, Patch, mixup_batch, one_hot, oversample, split_patches,
)
from asckit.spectra import FrameParams, Spectrogram


def _spec(t, fill=None, seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(0, 1, (128, t)) if fill is None else np.full((128, t), fill)
    return Spectrogram("logmel", data, FrameParams(), source_id=f"s{seed}")


def _patch(label, n_classes=4, seed=0):
    rng = np.random.default_rng(seed)
    return Patch(rng.normal(0, 1, (128, 128)), one_hot(label, n_classes))


def test_one_hot():
    y = one_hot(2, 4)
    assert y.tolist() == [0, 0, 1, 0]


def test_split_counts_and_remainder():
    patches = split_patches(_spec(128), 1, 4)
    assert len(patches) == 1
    patches = split_patches(_spec(300), 1, 4)
    assert len(patches) == 2  # 300 = 2*128 + 44, remainder dropped
    spec = _spec(300)
    got = split_patches(spec, 1, 4)
    assert np.array_equal(got[1].data, spec.data[:, 128:256])
    assert got[0].file_id == spec.source_id
    assert [p.index for p in got] == [0, 1]
    assert all(p.hard_label() == 1 for p in got)


def test_split_tiles_short_spectrogram():
    spec = _spec(50)
    patches = split_patches(spec, 0, 4)
    assert len(patches) == 1
    assert patches[0].data.shape == (128, 128)
    # cyclic tiling: column 50 repeats column 0
    assert np.array_equal(patches[0].data[:, 50], spec.data[:, 0])
    assert np.array_equal(patches[0].data[:, :50], spec.data)


def test_oversample_balances():
    patches = [_patch(0, seed=i) for i in range(7)] + \
              [_patch(1, seed=10 + i) for i in range(2)]
    out = oversample(patches, seed=5)
    counts = {}
    for p in out:
        counts[p.hard_label()] = counts.get(p.hard_label(), 0) + 1
    assert counts == {0: 7, 1: 7}
    # originals retained, in order, ahead of the duplicates
    assert all(o is p for o, p in zip(out[:9], patches))
    again = oversample(patches, seed=5)
    assert all(o is p for o, p in zip(out, again))
    assert len(oversample([_patch(0), _patch(1, seed=1)], 0)) == 2


def test_oversample_empty_class():
    with pytest.raises(BalanceError):
        oversample([], 0)


def test_mixup_even_batch_required():
    with pytest.raises(BatchError):
        mixup_batch([_patch(0)], MixupConfig())


def test_mixup_disabled_passthrough():
    batch = [_patch(0), _patch(1, seed=1)]
    out = mixup_batch(batch, MixupConfig(enabled=False))
    assert all(o is p for o, p in zip(out, batch))


def test_mixup_invariants():
    """Simplex preservation and bitwise data conservation per mixed pair."""
    rng = np.random.default_rng(123)
    cfg = MixupConfig(seed=123)
    for trial in range(200):
        a = _patch(trial % 4, seed=trial)
        b = _patch((trial + 1) % 4, seed=1000 + trial)
        m1, m2 = mixup_batch([a, b], cfg, rng)
        assert abs(m1.label.sum() - 1.0) <= 1e-9
        assert abs(m2.label.sum() - 1.0) <= 1e-9
        assert np.all(m1.label >= -1e-12) and np.all(m2.label >= -1e-12)
        # conservation, exact up to FP addition order
        assert np.array_equal(m2.data, (a.data + b.data) - m1.data)
        assert np.array_equal(m2.label, (a.label + b.label) - m1.label)


def test_mixup_gamma_one_identity():
    a, b = _patch(0), _patch(1, seed=1)

    class _Fixed:
        """Stub generator: coin flip picks the uniform branch, gamma = 1."""

        def __init__(self):
            self.draws = iter([0.0, 1.0])

        def uniform(self):
            return next(self.draws)

        def beta(self, *args):
            raise AssertionError("beta should not be drawn")

    m1, m2 = mixup_batch([a, b], MixupConfig(), _Fixed())
    assert np.array_equal(m1.data, a.data)
    assert np.array_equal(m1.label, a.label)
    assert np.array_equal(m2.data, b.data)
    assert np.array_equal(m2.label, b.label)


def test_mixup_deterministic_given_seed():
    batch = [_patch(i % 4, seed=i) for i in range(10)]
    out1 = mixup_batch(batch, MixupConfig(seed=9))
    out2 = mixup_batch(batch, MixupConfig(seed=9))
    for p, q in zip(out1, out2):
        assert np.array_equal(p.data, q.data)
        assert np.array_equal(p.label, q.label)


def test_mixup_config_validation():
    with pytest.raises(ValueError):
        MixupConfig(beta_alpha=0.0)
    with pytest.raises(ValueError):
        MixupConfig(uniform_share=1.5)
