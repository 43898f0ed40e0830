"""Shared fixtures: one synthetic corpus per session, features extracted once."""

import os

import pytest

from asckit import pipeline
from asckit.audio_io import SynthSpec, load_manifest, synth_dataset
from asckit.spectra import FrameParams


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    """The default 4-class, 120-clip corpus (seed 7)."""
    out = str(tmp_path_factory.mktemp("corpus"))
    synth_dataset(SynthSpec(), out)
    return out


@pytest.fixture(scope="session")
def corpus(corpus_dir):
    manifest = os.path.join(corpus_dir, "manifest.csv")
    entries, categories = load_manifest(manifest)
    return manifest, entries, categories


@pytest.fixture(scope="session")
def feature_dir(corpus, tmp_path_factory):
    """logmel/cqt/gam SPEC1 files for the whole corpus."""
    manifest, entries, _ = corpus
    out = str(tmp_path_factory.mktemp("features"))
    written, failures = pipeline.extract_features(
        manifest, entries, ["logmel", "cqt", "gam"], out, FrameParams())
    assert not failures
    assert written == 3 * len(entries)
    return out
