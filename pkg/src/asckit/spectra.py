"""The five 128-bin spectrogram front-ends: STFT, log-Mel, MFCC, CQT, GAM.

All kinds share one framing (window 1290, hop 256, 2048-point FFT) so every
extraction yields a 128 x T matrix with the same T. Filter banks are built
once per (sample rate, parameters) and cached.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .audio_io import AudioClip
from .errors import ConfigError, FormatError, KindError, TooShort

KINDS = ("stft", "logmel", "mfcc", "cqt", "gam")
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FrameParams:
    window_len: int = 1290
    hop: int = 256
    n_fft: int = 2048
    n_bands: int = 128
    f_min: float = 10.0

    def __post_init__(self):
        if self.window_len > self.n_fft:
            raise ConfigError("window_len must not exceed n_fft")
        if self.hop < 1:
            raise ConfigError("hop must be >= 1")


@dataclass(frozen=True)
class CqtParams:
    f_min: float = 10.0
    bins_per_octave: int = 24
    n_bins: int = 128
    alpha: float = 0.54

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def center_freqs(self) -> np.ndarray:
        k = np.arange(self.n_bins)
        return self.f_min * 2.0 ** (k / self.bins_per_octave)


@dataclass(frozen=True)
class GammatoneParams:
    order: int = 4
    n_bands: int = 128
    f_min: float = 10.0
    bandwidth_scale: float = 1.019


@dataclass
class FilterBank:
    weights: np.ndarray  # (n_bands, n_fft//2 + 1), rows sum to 1
    kind: str  # "mel" | "gammatone"
    center_freqs: np.ndarray


@dataclass
class Spectrogram:
    kind: str
    data: np.ndarray  # (128, T)
    params: FrameParams
    source_id: str = ""


def frame_count(n_samples: int, params: FrameParams) -> int:
    if n_samples < params.window_len:
        raise TooShort(f"{n_samples} samples < window {params.window_len}")
    return (n_samples - params.window_len) // params.hop + 1


def hamming_periodic(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / length)


def stft(clip: AudioClip, params: FrameParams = FrameParams(),
         window: str = "hamming") -> np.ndarray:
    """Magnitude STFT, shape (n_fft//2 + 1, T).

    Frame t covers samples [t*hop, t*hop + window_len), windowed and
    zero-padded to n_fft. `window` may be "hamming" or "rect".
    """
    x = np.ascontiguousarray(clip.samples, dtype=np.float64)
    T = frame_count(len(x), params)
    step = x.strides[0]
    frames = as_strided(x, (T, params.window_len), (params.hop * step, step))
    if window == "hamming":
        frames = frames * hamming_periodic(params.window_len)
    elif window == "rect":
        frames = frames.copy()
    else:
        raise ConfigError(f"unknown window {window!r}")
    mag = np.abs(np.fft.rfft(frames, n=params.n_fft, axis=1))
    return mag.T


def rescale_freq(lin: np.ndarray, n_out: int = 128) -> np.ndarray:
    """Linearly interpolate the frequency axis onto n_out uniform points."""
    F = lin.shape[0]
    if F < n_out:
        raise ConfigError(f"need >= {n_out} rows, got {F}")
    q = np.linspace(0.0, F - 1, n_out)
    lo = np.minimum(q.astype(int), F - 2)
    frac = (q - lo)[:, None]
    return lin[lo] * (1.0 - frac) + lin[lo + 1] * frac


# ---------------------------------------------------------------------------
# Filter banks

def hz_to_mel(f) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(fs: float, n_fft: int = 2048, n_mels: int = 128,
                   f_min: float = 10.0) -> FilterBank:
    """Triangular filters with centers uniform on the mel axis.

    Each row is normalized to sum to 1 over the n_fft//2 + 1 bin frequencies.
    """
    if f_min >= fs / 2:
        raise ConfigError("f_min must be below Nyquist")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(fs / 2), n_mels + 2))
    bin_freqs = np.arange(n_fft // 2 + 1) * fs / n_fft
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs - left) / (center - left)
    falling = (right - bin_freqs) / (right - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    sums = weights.sum(axis=1)
    if np.any(sums <= 0):
        raise ConfigError("a mel filter covers no FFT bin; reduce n_mels")
    weights /= sums[:, None]
    return FilterBank(weights=weights, kind="mel", center_freqs=edges[1:-1])


def erb(f) -> np.ndarray:
    """Equivalent rectangular bandwidth at frequency f (Hz)."""
    return 24.7 * (4.37e-3 * np.asarray(f, dtype=np.float64) + 1.0)


def erb_rate(f) -> np.ndarray:
    return 21.4 * np.log10(4.37e-3 * np.asarray(f, dtype=np.float64) + 1.0)


def erb_rate_to_hz(r) -> np.ndarray:
    return (10.0 ** (np.asarray(r, dtype=np.float64) / 21.4) - 1.0) / 4.37e-3


def gammatone_bank(fs: float, n_fft: int = 2048,
                   gparams: GammatoneParams = GammatoneParams()) -> FilterBank:
    """Gammatone magnitude responses sampled at the FFT bin frequencies.

    Centers are uniform on the ERB-rate scale in [f_min, fs/2]; row r peaks at
    its center with value (1 + ((f-f_r)/(1.019*ERB(f_r)))^2)^(-order/2) before
    row normalization.
    """
    if gparams.f_min >= fs / 2:
        raise ConfigError("f_min must be below Nyquist")
    centers = erb_rate_to_hz(
        np.linspace(erb_rate(gparams.f_min), erb_rate(fs / 2), gparams.n_bands)
    )
    bin_freqs = np.arange(n_fft // 2 + 1) * fs / n_fft
    bw = gparams.bandwidth_scale * erb(centers)
    u = (bin_freqs[None, :] - centers[:, None]) / bw[:, None]
    weights = (1.0 + u**2) ** (-gparams.order / 2.0)
    weights /= weights.sum(axis=1)[:, None]
    return FilterBank(weights=weights, kind="gammatone", center_freqs=centers)


_BANK_CACHE: dict[tuple, FilterBank] = {}


def _cached_bank(kind: str, fs: float, params: FrameParams) -> FilterBank:
    key = (kind, fs, params.n_fft, params.n_bands, params.f_min)
    if key not in _BANK_CACHE:
        if kind == "mel":
            _BANK_CACHE[key] = mel_filterbank(fs, params.n_fft, params.n_bands,
                                              params.f_min)
        else:
            _BANK_CACHE[key] = gammatone_bank(
                fs, params.n_fft, GammatoneParams(f_min=params.f_min,
                                                 n_bands=params.n_bands))
    return _BANK_CACHE[key]


# ---------------------------------------------------------------------------
# Spectrogram kinds

def log_mel(clip: AudioClip, params: FrameParams = FrameParams()) -> Spectrogram:
    bank = _cached_bank("mel", clip.sample_rate, params)
    data = np.log10(np.maximum(bank.weights @ stft(clip, params), LOG_FLOOR))
    return Spectrogram("logmel", data, params, clip.source_id)


def dct_matrix(n_keep: int = 64, n_in: int = 128) -> np.ndarray:
    """Orthonormal DCT-II basis, rows 0..n_keep-1."""
    k = np.arange(n_keep)[:, None]
    f = np.arange(n_in)[None, :]
    d = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * f + 1) / (2.0 * n_in))
    d[0] /= np.sqrt(2.0)
    return d


def mfcc(logmel_spec: Spectrogram) -> Spectrogram:
    """Per-frame DCT over the mel bins (64 kept) stacked with time deltas."""
    if logmel_spec.kind != "logmel":
        raise KindError(f"mfcc expects logmel input, got {logmel_spec.kind}")
    n_bands = logmel_spec.data.shape[0]
    dct = dct_matrix(n_bands // 2, n_bands) @ logmel_spec.data
    padded = np.pad(dct, ((0, 0), (1, 1)), mode="edge")
    delta = 0.5 * (padded[:, :-2] - padded[:, 2:])
    return Spectrogram("mfcc", np.vstack([dct, delta]), logmel_spec.params,
                       logmel_spec.source_id)


def cqt(clip: AudioClip, cqt_params: CqtParams = CqtParams(),
        params: FrameParams = FrameParams()) -> Spectrogram:
    """Constant-Q magnitudes by direct windowed correlation per bin.

    Columns are centered at t*hop so T matches the STFT frame count;
    out-of-range samples read as zero.
    """
    fs = clip.sample_rate
    freqs = cqt_params.center_freqs()
    if freqs[-1] >= fs / 2:
        raise ConfigError(f"top CQT bin {freqs[-1]:.1f} Hz >= Nyquist")
    q = cqt_params.q_factor
    T = frame_count(len(clip.samples), params)
    hop = params.hop

    n0 = int(round(q * fs / freqs[0]))
    left = n0 // 2
    right = n0 - left
    padded = np.concatenate([np.zeros(left), clip.samples, np.zeros(right)])
    padded = np.ascontiguousarray(padded, dtype=np.float64)
    step = padded.strides[0]

    out = np.empty((cqt_params.n_bins, T))
    for k, fk in enumerate(freqs):
        nk = int(round(q * fs / fk))
        n = np.arange(nk)
        w = cqt_params.alpha + (1 - cqt_params.alpha) * np.cos(
            2.0 * np.pi * n / (nk - 1))
        phase = 2.0 * np.pi * n * q / nk
        kern_r = w * np.cos(phase) / nk
        kern_i = w * np.sin(phase) / nk
        start = left - nk // 2
        frames = as_strided(padded[start:], (T, nk), (hop * step, step))
        out[k] = np.hypot(frames @ kern_r, frames @ kern_i)
    return Spectrogram("cqt", out, params, clip.source_id)


def gam(clip: AudioClip, params: FrameParams = FrameParams()) -> Spectrogram:
    bank = _cached_bank("gammatone", clip.sample_rate, params)
    data = np.log10(np.maximum(bank.weights @ stft(clip, params), LOG_FLOOR))
    return Spectrogram("gam", data, params, clip.source_id)


def extract(clip: AudioClip, kind: str,
            params: FrameParams = FrameParams(),
            cqt_params: CqtParams | None = None) -> Spectrogram:
    """Dispatch to one kind's extractor; all kinds return 128 x T, same T."""
    if kind == "stft":
        data = np.log10(np.maximum(
            rescale_freq(stft(clip, params), params.n_bands), LOG_FLOOR))
        spec = Spectrogram("stft", data, params, clip.source_id)
    elif kind == "logmel":
        spec = log_mel(clip, params)
    elif kind == "mfcc":
        spec = mfcc(log_mel(clip, params))
    elif kind == "cqt":
        spec = cqt(clip, cqt_params or CqtParams(f_min=params.f_min), params)
    elif kind == "gam":
        spec = gam(clip, params)
    else:
        raise KindError(f"unknown spectrogram kind {kind!r}")
    T = frame_count(len(clip.samples), params)
    assert spec.data.shape == (params.n_bands, T)
    return spec


# ---------------------------------------------------------------------------
# SPEC1 feature file format

SPEC_MAGIC = b"SPEC1"


def write_spec(path: str, spec: Spectrogram, label: str | None = None) -> None:
    """Magic "SPEC1", one JSON header line, then F*T little-endian float32."""
    f_bins, t = spec.data.shape
    header = {
        "kind": spec.kind,
        "F": f_bins,
        "T": t,
        "params": {
            "window_len": spec.params.window_len,
            "hop": spec.params.hop,
            "n_fft": spec.params.n_fft,
            "n_bands": spec.params.n_bands,
            "f_min": spec.params.f_min,
        },
        "source_id": spec.source_id,
    }
    if label is not None:
        header["label"] = label
    with open(path, "wb") as fh:
        fh.write(SPEC_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(spec.data.astype("<f4").tobytes())


def read_spec(path: str) -> tuple[Spectrogram, str | None]:
    with open(path, "rb") as fh:
        if fh.read(len(SPEC_MAGIC)) != SPEC_MAGIC:
            raise FormatError(f"{path}: bad magic")
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad header") from exc
        f_bins, t = header["F"], header["T"]
        blob = fh.read()
    expected = f_bins * t * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: blob is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(f_bins, t)
    params = FrameParams(**header["params"])
    spec = Spectrogram(header["kind"], data, params, header.get("source_id", ""))
    return spec, header.get("label")
