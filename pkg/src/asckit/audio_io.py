"""WAV decoding, dataset manifests, and the deterministic synthetic corpus.

Only RIFF/WAVE is supported (PCM16, PCM24, float32). Clips are consumed at
their native sample rate; stereo files contribute channel 1 only.
"""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DecodeError, IoError, ManifestError, UnsupportedFormat

SPLITS = ("train", "test")


@dataclass
class AudioClip:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int
    source_id: str = ""
    channel_taken: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise DecodeError("clip has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise DecodeError("clip contains non-finite samples")
        if self.sample_rate <= 0:
            raise DecodeError("sample rate must be positive")


@dataclass
class ManifestEntry:
    path: str
    label: str
    device: str = ""
    fold: int | None = None
    split: str = "train"


@dataclass
class SynthSpec:
    n_classes: int = 4
    clips_per_class: int = 30
    clip_seconds: float = 2.2
    sample_rate: int = 16000
    seed: int = 7
    imbalance: dict[int, float] | None = None

    MIN_SAMPLES = 1290 + 127 * 256  # one full 128-frame patch

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.clip_seconds * self.sample_rate < self.MIN_SAMPLES:
            raise ValueError(
                f"clips must span >= {self.MIN_SAMPLES} samples for one patch"
            )


# ---------------------------------------------------------------------------
# WAV decode / encode

def _parse_riff(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body_end = pos + 8 + size
        if body_end > len(data):
            raise DecodeError(f"chunk {cid!r} declares {size} bytes past end of file")
        if cid in (b"fmt ", b"data") and cid not in chunks:
            chunks[cid] = data[pos + 8:body_end]
        pos = body_end + (size & 1)  # chunks are word-aligned
    if b"fmt " not in chunks or b"data" not in chunks:
        raise DecodeError("missing fmt or data chunk")
    return chunks[b"fmt "], chunks[b"data"]


def read_wav(path: str) -> AudioClip:
    """Decode a WAV file, keeping the first channel only.

    Integer PCM is normalized by 2^(bits-1); no resampling is performed.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    fmt, body = _parse_riff(data)
    if len(fmt) < 16:
        raise DecodeError("fmt chunk too short")
    audio_format, n_channels, sample_rate, _, _, bits = struct.unpack(
        "<HHIIHH", fmt[:16]
    )
    if n_channels not in (1, 2):
        raise UnsupportedFormat(f"{n_channels} channels not supported")
    if audio_format == 1 and bits in (16, 24):
        pass
    elif audio_format == 3 and bits == 32:
        pass
    else:
        raise UnsupportedFormat(f"format={audio_format}, bits={bits}")
    bytes_per = bits // 8
    frame_size = bytes_per * n_channels
    if len(body) % frame_size:
        body = body[: len(body) - len(body) % frame_size]
    if not body:
        raise DecodeError("empty data chunk")

    if bits == 16:
        raw = np.frombuffer(body, dtype="<i2").astype(np.float64)
        samples = raw / 32768.0
    elif bits == 24:
        b = np.frombuffer(body, dtype=np.uint8).reshape(-1, 3)
        raw = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        raw = np.where(raw >= 1 << 23, raw - (1 << 24), raw)
        samples = raw.astype(np.float64) / float(1 << 23)
    else:  # float32
        samples = np.frombuffer(body, dtype="<f4").astype(np.float64)

    if n_channels == 2:
        samples = samples[0::2]
    return AudioClip(
        samples=samples,
        sample_rate=sample_rate,
        source_id=os.path.basename(path),
        channel_taken=0,
    )


def write_wav(path: str, samples: np.ndarray, sample_rate: int) -> None:
    """Write mono PCM16. Samples in [-1, 1] map to words via round(x * 32768)."""
    x = np.asarray(samples, dtype=np.float64)
    words = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
    body = words.tobytes()
    buf = io.BytesIO()
    buf.write(b"RIFF")
    buf.write(struct.pack("<I", 36 + len(body)))
    buf.write(b"WAVE")
    buf.write(b"fmt ")
    buf.write(struct.pack("<IHHIIHH", 16, 1, 1, sample_rate,
                          sample_rate * 2, 2, 16))
    buf.write(b"data")
    buf.write(struct.pack("<I", len(body)))
    buf.write(body)
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Manifests

MANIFEST_HEADER = ["path", "label", "device", "fold", "split"]


def load_manifest(path: str) -> tuple[list[ManifestEntry], list[str]]:
    """Parse a manifest CSV; returns (entries, sorted category names).

    Category index of a label is its rank in the sorted distinct label list.
    """
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"bad header {header!r}, expected {MANIFEST_HEADER}")
        for i, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ManifestError(f"row {i}: expected 5 columns, got {len(row)}")
            p, label, device, fold, split = row
            if p in seen:
                raise ManifestError(f"row {i}: duplicate path {p!r}")
            seen.add(p)
            if split not in SPLITS:
                raise ManifestError(f"row {i}: unknown split {split!r}")
            entries.append(
                ManifestEntry(
                    path=p,
                    label=label,
                    device=device,
                    fold=int(fold) if fold else None,
                    split=split,
                )
            )
    if not entries:
        raise ManifestError("no entries")
    categories = sorted({e.label for e in entries})
    return entries, categories


def write_manifest(path: str, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow(
                [e.path, e.label, e.device, "" if e.fold is None else e.fold, e.split]
            )


def import_dcase_meta(meta_path: str, out_csv: str, split: str = "train") -> None:
    """Normalize a tab-separated DCASE meta file into the manifest CSV."""
    entries = []
    with open(meta_path) as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2 or not parts[0]:
                continue
            device = parts[3].upper() if len(parts) > 3 else ""
            entries.append(
                ManifestEntry(path=parts[0], label=parts[1], device=device, split=split)
            )
    if not entries:
        raise ManifestError("no entries in meta file")
    write_manifest(out_csv, entries)


# ---------------------------------------------------------------------------
# Synthetic corpus

def _class_signature(c: int, fs: int):
    """Per-class tone-comb fundamental and noise-band center, in Hz.

    Fundamentals stay below ~390 Hz so classes remain separable under the
    CQT front-end's low frequency ceiling.
    """
    f0 = min(65.0 + 55.0 * c, 0.45 * fs / 2)
    band = min(350.0 + 400.0 * c, 0.8 * fs / 2)
    return f0, band


def _synth_clip(c: int, i: int, spec: SynthSpec) -> np.ndarray:
    fs = spec.sample_rate
    n = int(round(spec.clip_seconds * fs))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, c, i]))
    t = np.arange(n) / fs
    f0, band_center = _class_signature(c, fs)

    sig = np.zeros(n)
    for k in range(1, 7):
        if k * f0 >= fs / 2:
            break
        phase = rng.uniform(0, 2 * np.pi)
        sig += (0.6 / k) * np.cos(2 * np.pi * k * f0 * t + phase)

    # class-specific band-limited noise, shaped in the frequency domain
    white = rng.standard_normal(n)
    spec_w = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / fs)
    mask = np.exp(-0.5 * ((freqs - band_center) / 125.0) ** 2)
    band = np.fft.irfft(spec_w * mask, n=n)
    band_rms = np.sqrt(np.mean(band**2)) + 1e-12
    sig += band * (0.25 / band_rms)

    # white noise at ~10 dB SNR relative to the structured part
    sig_power = np.mean(sig**2)
    noise = rng.standard_normal(n)
    noise *= np.sqrt(sig_power / 10.0 / np.mean(noise**2))
    sig += noise

    peak = np.max(np.abs(sig)) + 1e-12
    return sig * (0.8 / peak)


def synth_dataset(spec: SynthSpec, out_dir: str) -> str:
    """Generate the synthetic corpus; returns the manifest path.

    Fully determined by spec.seed: reruns produce byte-identical WAVs and
    manifest. Each class is split 80/20 train/test.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if not os.access(out_dir, os.W_OK):
        raise IoError(f"directory not writable: {out_dir}")

    imbalance = spec.imbalance or {}
    width = max(2, len(str(spec.n_classes - 1)))
    entries: list[ManifestEntry] = []
    for c in range(spec.n_classes):
        n_clips = int(round(spec.clips_per_class * imbalance.get(c, 1.0)))
        label = f"class{c:0{width}d}"
        split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 999, c]))
        order = split_rng.permutation(n_clips)
        n_train = int(round(0.8 * n_clips))
        train_set = set(order[:n_train].tolist())
        for i in range(n_clips):
            name = f"{label}_clip{i:03d}.wav"
            write_wav(os.path.join(out_dir, name), _synth_clip(c, i, spec),
                      spec.sample_rate)
            entries.append(
                ManifestEntry(
                    path=name,
                    label=label,
                    split="train" if i in train_set else "test",
                )
            )
    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest_path, entries)
    return manifest_path


def corpus_checksum(out_dir: str) -> str:
    """SHA-256 over all WAVs plus the manifest, in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(os.listdir(out_dir)):
        if name.endswith(".wav") or name == "manifest.csv":
            h.update(name.encode())
            with open(os.path.join(out_dir, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
