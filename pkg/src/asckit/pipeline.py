"""Glue between manifests, feature files, models, and posteriors."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import models as models_mod
from . import spectra
from .audio_io import ManifestEntry, read_wav
from .errors import KindError
from .fusion import patch_mean
from .patchlab import split_patches

log = logging.getLogger("asckit.pipeline")


def feature_path(feat_dir: str, entry_path: str, kind: str) -> str:
    stem = os.path.splitext(entry_path.replace(os.sep, "__"))[0]
    return os.path.join(feat_dir, f"{stem}__{kind}.spec")


def resolve_audio(manifest_path: str, entry: ManifestEntry) -> str:
    if os.path.isabs(entry.path):
        return entry.path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)),
                        entry.path)


def get_spectrogram(manifest_path: str, entry: ManifestEntry, kind: str,
                    feat_dir: str | None,
                    params: spectra.FrameParams) -> spectra.Spectrogram:
    """Read a cached SPEC1 file when present, else extract from the WAV."""
    if feat_dir:
        path = feature_path(feat_dir, entry.path, kind)
        if os.path.exists(path):
            spec, _ = spectra.read_spec(path)
            if spec.kind != kind:
                raise KindError(f"{path} holds {spec.kind}, wanted {kind}")
            return spec
    clip = read_wav(resolve_audio(manifest_path, entry))
    clip.source_id = entry.path
    return spectra.extract(clip, kind, params)


def extract_features(manifest_path: str, entries: list[ManifestEntry],
                     kinds: list[str], out_dir: str,
                     params: spectra.FrameParams, force: bool = False,
                     threads: int = 1) -> tuple[int, list[str]]:
    """Write one SPEC1 file per (clip, kind); returns (written, failures)."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for entry in entries:
        for kind in kinds:
            out = feature_path(out_dir, entry.path, kind)
            if force or not os.path.exists(out):
                jobs.append((entry, kind, out))

    failures: list[str] = []

    def _one(job):
        entry, kind, out = job
        try:
            clip = read_wav(resolve_audio(manifest_path, entry))
            clip.source_id = entry.path
            spec = spectra.extract(clip, kind, params)
            spectra.write_spec(out, spec, label=entry.label)
        except Exception as exc:  # noqa: BLE001 - reported per file
            failures.append(f"{entry.path} [{kind}]: {exc}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_one, jobs))
    else:
        for job in jobs:
            _one(job)
    return len(jobs) - len(failures), failures


def file_posterior(model, spec: spectra.Spectrogram,
                   batch_size: int = 50) -> np.ndarray:
    """Eval-mode file-level posterior for one spectrogram."""
    patches = split_patches(spec, 0, model.n_classes)
    if model.stats is not None:
        patches = [models_mod.normalize(p, model.stats) for p in patches]
    x = np.stack([p.data for p in patches]).astype(np.float32)[..., None]
    outs = [model.forward(x[i:i + batch_size], train=False)
            for i in range(0, len(x), batch_size)]
    return patch_mean(np.concatenate(outs), spec.source_id).probs


def infer_files(model, manifest_path: str, entries: list[ManifestEntry],
                feat_dir: str | None,
                params: spectra.FrameParams) -> dict[str, np.ndarray]:
    """File-level posteriors for the model's spectrogram kind."""
    out = {}
    for entry in entries:
        spec = get_spectrogram(manifest_path, entry, model.kind, feat_dir,
                               params)
        out[entry.path] = file_posterior(model, spec)
    return out
