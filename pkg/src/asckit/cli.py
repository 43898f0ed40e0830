"""Command-line front door: synth, extract, train, infer, fuse-eval.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import fusion, models, pipeline, spectra
from .audio_io import SynthSpec, corpus_checksum, load_manifest, synth_dataset
from .errors import AsckitError, ConfigError, KindError
from .patchlab import MixupConfig, split_patches
from .spectra import KINDS, FrameParams

log = logging.getLogger("asckit")


class UsageError(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ASCKIT_THREADS", "1")))
    except ValueError:
        return 1


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise UsageError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path: str) -> dict:
    """Validate the run-config JSON before any file I/O happens."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    _check_keys(cfg, {"train", "mixup", "frame", "paths", "target_acc"},
                "config")
    _check_keys(cfg.get("train", {}),
                {"learning_rate", "batch_size", "epochs", "l2_lambda",
                 "beta1", "beta2", "eps", "seed"}, "config.train")
    _check_keys(cfg.get("mixup", {}),
                {"enabled", "beta_alpha", "uniform_share", "seed"},
                "config.mixup")
    _check_keys(cfg.get("frame", {}),
                {"window_len", "hop", "n_fft", "n_bands", "f_min"},
                "config.frame")
    _check_keys(cfg.get("paths", {}),
                {"manifest", "features", "checkpoints", "reports"},
                "config.paths")
    paths = cfg.get("paths", {})
    if "manifest" not in paths:
        raise UsageError("config.paths.manifest is required")
    if not os.path.exists(paths["manifest"]):
        raise UsageError(f"manifest not found: {paths['manifest']}")
    try:
        cfg["train_cfg"] = models.TrainConfig(**cfg.get("train", {}))
        cfg["mixup_cfg"] = MixupConfig(**cfg.get("mixup", {}))
        cfg["frame_cfg"] = FrameParams(**cfg.get("frame", {}))
    except (ConfigError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args) -> int:
    kwargs = {}
    if args.spec:
        try:
            with open(args.spec) as fh:
                kwargs = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read spec: {exc}") from exc
        if "imbalance" in kwargs and kwargs["imbalance"] is not None:
            kwargs["imbalance"] = {int(k): v
                                   for k, v in kwargs["imbalance"].items()}
    for name in ("n_classes", "clips_per_class", "clip_seconds",
                 "sample_rate", "seed"):
        value = getattr(args, name)
        if value is not None:
            kwargs[name] = value
    try:
        spec = SynthSpec(**kwargs)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = synth_dataset(spec, args.out)
    print(manifest)
    print(f"checksum {corpus_checksum(args.out)}")
    return 0


def _parse_kinds(token: str) -> list[str]:
    kinds = list(KINDS) if token == "all" else token.split(",")
    for kind in kinds:
        if kind not in KINDS:
            raise UsageError(f"unknown kind {kind!r} (choose from {KINDS})")
    return kinds


def cmd_extract(args) -> int:
    kinds = _parse_kinds(args.kinds)
    entries, _ = load_manifest(args.manifest)
    written, failures = pipeline.extract_features(
        args.manifest, entries, kinds, args.out, FrameParams(),
        force=args.force, threads=_threads())
    print(f"{written} feature files written")
    if failures:
        for line in failures:
            print(f"FAILED {line}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.kind not in KINDS:
        raise UsageError(f"unknown kind {args.kind!r}")
    if args.arch not in ("cdnn", "joint"):
        raise UsageError(f"unknown architecture {args.arch!r}")
    paths = cfg["paths"]
    frame = cfg["frame_cfg"]
    entries, categories = load_manifest(paths["manifest"])
    train_entries = [e for e in entries if e.split == "train"]
    feat_dir = paths.get("features")

    specs = [pipeline.get_spectrogram(paths["manifest"], e, args.kind,
                                      feat_dir, frame)
             for e in train_entries]
    stats = models.fit_stats(specs)
    patches = []
    for entry, spec in zip(train_entries, specs):
        for p in split_patches(spec, categories.index(entry.label),
                               len(categories)):
            patches.append(models.normalize(p, stats))

    model = models.build_model(args.arch, len(categories),
                               seed=cfg["train_cfg"].seed)
    model.kind = args.kind
    model.stats = stats
    ckpt_dir = paths.get("checkpoints", ".")
    os.makedirs(ckpt_dir, exist_ok=True)
    log_path = os.path.join(ckpt_dir, f"{args.arch}_{args.kind}_epochs.csv")
    logs = models.train(model, patches, cfg["train_cfg"], cfg["mixup_cfg"],
                        log_path=log_path, target_acc=cfg.get("target_acc"))
    ckpt_path = os.path.join(ckpt_dir, f"{args.arch}_{args.kind}.ckpt")
    models.save_checkpoint(model, ckpt_path)
    print(ckpt_path)
    print(f"final train accuracy {logs[-1].train_acc!r}")
    return 0


def cmd_infer(args) -> int:
    model = models.load_checkpoint(args.checkpoint)
    if args.kind and model.kind != args.kind:
        raise UsageError(
            f"checkpoint holds kind {model.kind!r}, requested {args.kind!r}")
    entries, _ = load_manifest(args.manifest)
    entries = [e for e in entries if e.split == args.split]
    probs = pipeline.infer_files(model, args.manifest, entries,
                                 args.features, FrameParams())
    fusion.dump_probs(
        [(fid, model.kind, probs[fid]) for fid in sorted(probs)], args.out)
    print(args.out)
    return 0


def cmd_fuse_eval(args) -> int:
    if args.strategy not in fusion.STRATEGIES:
        raise UsageError(f"unknown strategy {args.strategy!r}")
    entries, categories = load_manifest(args.manifest)
    labels = {e.path: categories.index(e.label) for e in entries
              if e.split == args.split}
    devices = {e.path: e.device for e in entries if e.split == args.split}

    probs_by_kind: dict[str, dict[str, np.ndarray]] = {}
    for path in args.probs:
        for fid, kind, vec in fusion.load_probs(path):
            probs_by_kind.setdefault(kind, {})[fid] = vec
    kinds = tuple(sorted(probs_by_kind))

    expected = set(labels)
    for kind in kinds:
        got = set(probs_by_kind[kind])
        if got != expected:
            diff = sorted(got.symmetric_difference(expected))
            print(f"file_id mismatch for kind {kind}: {diff}", file=sys.stderr)
            return 1

    report = fusion.evaluate_probs(probs_by_kind, labels, categories, kinds,
                                   args.strategy, devices)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json() + "\n")
        print(args.out)
    print(report.table())
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asckit",
        description="Acoustic scene classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--spec", help="JSON file with SynthSpec fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--clips-per-class", dest="clips_per_class", type=int)
    p.add_argument("--clip-seconds", dest="clip_seconds", type=float)
    p.add_argument("--sample-rate", dest="sample_rate", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="write SPEC1 feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kinds", required=True,
                   help="comma list of kinds, or 'all'")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true",
                   help="rewrite existing feature files")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train one model for one kind")
    p.add_argument("--config", required=True, help="run-config JSON")
    p.add_argument("--kind", required=True)
    p.add_argument("--arch", default="joint", help="cdnn or joint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="emit file-level posteriors as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", help="SPEC1 directory (extracted on the fly "
                                      "when absent)")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--kind", help="assert the checkpoint's kind")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse-eval", help="fuse posterior CSVs and evaluate")
    p.add_argument("--probs", nargs="+", required=True)
    p.add_argument("--strategy", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_fuse_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("ASCKIT_LOGLEVEL", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, KindError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AsckitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
