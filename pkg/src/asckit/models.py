"""Model assembly (C-DNN, C-RNN branch, joint network), training, checkpoints."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import (
    AvgPool2D, BatchNorm, BiGRU, Concat, Conv2D, Dense, Dropout,
    GlobalAvgPool, ReLU, Reshape, Sequential, Softmax, TimeFeatureMean,
)
from .errors import CheckpointError, ConfigError, TrainError
from .patchlab import MixupConfig, Patch, mixup_batch, oversample

log = logging.getLogger("asckit.models")

ENGINE_VERSION = 1
CKPT_MAGIC = b"ASCK1"

# expected block-boundary shape traces (batch axis omitted)
CDNN_TRACE = [
    (64, 64, 32), (32, 32, 64), (32, 32, 128), (16, 16, 128),
    (16, 16, 256), (256,),
]
CDNN_HEAD_TRACE = [(512,), (1024,)]
CRNN_TRACE = [
    (64, 128, 32), (32, 128, 64), (16, 128, 128), (128, 256),
    (128, 256), (128,),
]
DNN02_TRACE = [(2048,), (1024,)]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 50
    epochs: int = 100
    l2_lambda: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0 or self.l2_lambda < 0:
            raise ConfigError("learning_rate and l2_lambda must be non-negative")
        if self.batch_size % 2:
            raise ConfigError("batch_size must be even (mixup pairing)")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float


# ---------------------------------------------------------------------------
# Builders

def _cdnn_conv_blocks(rng, dtype):
    return [
        # Vg-Cv Block 01
        BatchNorm(1, dtype=dtype), Conv2D(9, 9, 1, 32, rng, dtype), ReLU(),
        BatchNorm(32, dtype=dtype), AvgPool2D(2, 2), Dropout(0.10),
        # Vg-Cv Block 02
        Conv2D(7, 7, 32, 64, rng, dtype), ReLU(), BatchNorm(64, dtype=dtype),
        AvgPool2D(2, 2), Dropout(0.15),
        # Vg-Cv Block 03
        Conv2D(5, 5, 64, 128, rng, dtype), ReLU(), BatchNorm(128, dtype=dtype),
        Dropout(0.20),
        # Vg-Cv Block 04
        Conv2D(5, 5, 128, 128, rng, dtype), ReLU(), BatchNorm(128, dtype=dtype),
        AvgPool2D(2, 2), Dropout(0.20),
        # Vg-Cv Block 05
        Conv2D(3, 3, 128, 256, rng, dtype), ReLU(), BatchNorm(256, dtype=dtype),
        Dropout(0.25),
        # Vg-Cv Block 06
        Conv2D(3, 3, 256, 256, rng, dtype), ReLU(), BatchNorm(256, dtype=dtype),
        GlobalAvgPool(), Dropout(0.25),
    ]


def _crnn_layers(rng, dtype):
    return [
        # Re-Cv Block 01
        BatchNorm(1, dtype=dtype), Conv2D(4, 1, 1, 32, rng, dtype), ReLU(),
        BatchNorm(32, dtype=dtype), AvgPool2D(2, 1), Dropout(0.10),
        # Re-Cv Block 02
        Conv2D(4, 1, 32, 64, rng, dtype), ReLU(), BatchNorm(64, dtype=dtype),
        AvgPool2D(2, 1), Dropout(0.15),
        # Re-Cv Block 03
        Conv2D(4, 1, 64, 128, rng, dtype), ReLU(), BatchNorm(128, dtype=dtype),
        AvgPool2D(2, 1), Dropout(0.20),
        # Re-Cv Block 04
        Conv2D(4, 1, 128, 256, rng, dtype), ReLU(), BatchNorm(256, dtype=dtype),
        AvgPool2D(16, 1), Dropout(0.20),
        # 1 x 128 x 256 -> 128-step sequence of 256-dim frames
        Reshape((128, 256)),
        BiGRU(256, 128, 0.3, rng, dtype),
        TimeFeatureMean(),
    ]


def _assert_trace(got, expected, what):
    if list(got) != list(expected):
        raise ConfigError(f"{what} shape trace {got} != expected {expected}")


class SequentialModel:
    """A single chain of layers ending in softmax (the C-DNN)."""

    arch = "cdnn"

    def __init__(self, net: Sequential, n_classes: int):
        self.net = net
        self.n_classes = n_classes
        self.kind: str | None = None
        self.stats = None

    def params(self):
        return self.net.params()

    def forward(self, x, train=False):
        return self.net.forward(x, train)

    def backward(self, dout):
        return self.net.backward(dout)

    def _layer_groups(self):
        return [("net", self.net)]

    def seed_rng(self, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
        for _, seq in self._layer_groups():
            for layer in seq.layers:
                if isinstance(layer, (Dropout, BiGRU)):
                    layer.rng = rng

    def state_items(self):
        """Ordered (name, holder, attr) for every persisted array."""
        items = []
        for prefix, seq in self._layer_groups():
            for i, layer in enumerate(seq.layers):
                base = f"{prefix}.{i:02d}.{layer.name}"
                for p in layer.params():
                    items.append((f"{base}.{p.name}", p, "value"))
                if isinstance(layer, BatchNorm):
                    items.append((f"{base}.running_mean", layer, "running_mean"))
                    items.append((f"{base}.running_var", layer, "running_var"))
        return items


class JointModel(SequentialModel):
    """Parallel CNN and C-RNN branches, concatenated, classified by DNN-02."""

    arch = "joint"

    def __init__(self, cnn: Sequential, crnn: Sequential, head: Sequential,
                 n_classes: int):
        self.cnn = cnn
        self.crnn = crnn
        self.head = head
        self.concat = Concat()
        self.n_classes = n_classes
        self.kind = None
        self.stats = None

    def params(self):
        return self.cnn.params() + self.crnn.params() + self.head.params()

    def forward(self, x, train=False):
        a = self.cnn.forward(x, train)
        b = self.crnn.forward(x, train)
        return self.head.forward(self.concat.forward_many([a, b]), train)

    def backward(self, dout):
        dz = self.head.backward(dout)
        da, db = self.concat.backward_many(dz)
        dxa = self.cnn.backward(da)
        dxb = self.crnn.backward(db)
        return dxa + dxb

    def _layer_groups(self):
        return [("cnn", self.cnn), ("crnn", self.crnn), ("head", self.head)]


def build_cdnn(n_classes: int, seed: int = 0, dtype=np.float32) -> SequentialModel:
    """C-DNN: six Vg-Cv blocks then the 512/1024/C dense head."""
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    layers = _cdnn_conv_blocks(rng, dtype) + [
        Dense(256, 512, rng, dtype), ReLU(), Dropout(0.30),
        Dense(512, 1024, rng, dtype), ReLU(), Dropout(0.30),
        Dense(1024, n_classes, rng, dtype), Softmax(),
    ]
    net = Sequential(layers, "cdnn")
    trace = net.shape_trace((128, 128, 1))
    boundaries = [5, 10, 14, 19, 23, 28, 31, 34, 36]
    got = [trace[i] for i in boundaries]
    _assert_trace(got, CDNN_TRACE + CDNN_HEAD_TRACE + [(n_classes,)], "C-DNN")
    return SequentialModel(net, n_classes)


def build_crnn_branch(seed: int = 0, dtype=np.float32) -> Sequential:
    """C-RNN embedding branch: four Re-Cv blocks, Bi-GRU, per-frame mean."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 22]))
    net = Sequential(_crnn_layers(rng, dtype), "crnn")
    trace = net.shape_trace((128, 128, 1))
    boundaries = [5, 10, 15, 21, 22, 23]
    got = [trace[i] for i in boundaries]
    _assert_trace(got, CRNN_TRACE, "C-RNN")
    return net


def build_joint(n_classes: int, seed: int = 0, dtype=np.float32) -> JointModel:
    """Joint network: CNN branch (256) + C-RNN branch (128) -> DNN-02."""
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    cnn = Sequential(_cdnn_conv_blocks(rng, dtype), "cnn")
    _assert_trace([cnn.shape_trace((128, 128, 1))[i] for i in
                   [5, 10, 14, 19, 23, 28]], CDNN_TRACE, "joint CNN branch")
    crnn = build_crnn_branch(seed, dtype)
    head = Sequential([
        Dense(384, 2048, rng, dtype), ReLU(), Dropout(0.30),
        Dense(2048, 1024, rng, dtype), ReLU(), Dropout(0.30),
        Dense(1024, n_classes, rng, dtype), Softmax(),
    ], "dnn02")
    trace = head.shape_trace((384,))
    _assert_trace([trace[2], trace[5], trace[7]],
                  DNN02_TRACE + [(n_classes,)], "DNN-02")
    return JointModel(cnn, crnn, head, n_classes)


def build_model(arch: str, n_classes: int, seed: int = 0, dtype=np.float32):
    if arch == "cdnn":
        return build_cdnn(n_classes, seed, dtype)
    if arch == "joint":
        return build_joint(n_classes, seed, dtype)
    raise ConfigError(f"unknown architecture {arch!r}")


# ---------------------------------------------------------------------------
# Normalization

STD_FLOOR = 1e-6


def fit_stats(spectrograms) -> tuple[np.ndarray, np.ndarray]:
    """Per-frequency-bin mean/std over the training split's time frames."""
    data = np.concatenate([s.data for s in spectrograms], axis=1)
    mean = data.mean(axis=1)
    std = np.maximum(data.std(axis=1), STD_FLOOR)
    return mean, std


def normalize(patch: Patch, stats) -> Patch:
    mean, std = stats
    return Patch((patch.data - mean[:, None]) / std[:, None], patch.label,
                 patch.file_id, patch.index)


# ---------------------------------------------------------------------------
# Training

def _stack(patches: list[Patch], dtype=np.float32):
    x = np.stack([p.data for p in patches]).astype(dtype)[..., None]
    y = np.stack([p.label for p in patches]).astype(dtype)
    return x, y


def _eval_accuracy(model, x, hard, batch_size):
    correct = 0
    for i in range(0, len(x), batch_size):
        out = model.forward(x[i:i + batch_size], train=False)
        correct += int(np.sum(np.argmax(out, axis=1) == hard[i:i + batch_size]))
    return correct / len(x)


def train(model, patches: list[Patch], cfg: TrainConfig,
          mixup_cfg: MixupConfig | None = None,
          log_path: str | None = None,
          target_acc: float | None = None) -> list[EpochLog]:
    """Mixup-augmented training with the KL+L2 loss and Adam.

    Per epoch: seeded shuffle -> batches of cfg.batch_size (trailing partial
    dropped) -> mixup -> forward/backward -> Adam. Oversampling runs once up
    front and is reused. The epoch log records mean batch loss and eval-mode
    train accuracy; with target_acc set, training stops once it is reached.
    """
    if len(patches) < cfg.batch_size:
        raise TrainError(f"need >= {cfg.batch_size} patches, got {len(patches)}")
    mixup_cfg = mixup_cfg or MixupConfig(seed=cfg.seed)
    balanced = oversample(patches, cfg.seed)
    model.seed_rng(cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = model.params()
    state = engine.adam_init(params)

    x_eval, y_eval = _stack(patches)
    hard = np.argmax(y_eval, axis=1)

    logs: list[EpochLog] = []
    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        order = rng.permutation(len(balanced))
        losses = []
        n_batches = len(balanced) // cfg.batch_size
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            batch = [balanced[i] for i in idx]
            if mixup_cfg.enabled:
                batch = mixup_batch(batch, mixup_cfg, rng)
            xb, yb = _stack(batch)
            out = model.forward(xb, train=True)
            loss, dpred = engine.kl_loss(yb, out, params, cfg.l2_lambda)
            if not np.isfinite(loss):
                raise TrainError(f"non-finite loss at epoch {epoch} batch {bi}")
            model.backward(dpred)
            engine.apply_l2(params, cfg.l2_lambda)
            engine.adam_step(params, state, cfg.learning_rate, cfg.beta1,
                             cfg.beta2, cfg.eps)
            losses.append(loss)
        acc = _eval_accuracy(model, x_eval, hard, cfg.batch_size)
        logs.append(EpochLog(epoch, float(np.mean(losses)), acc))
        log.info("epoch %d loss %.5f acc %.4f (%.1fs)", epoch, logs[-1].loss,
                 acc, time.monotonic() - t0)
        if target_acc is not None and acc >= target_acc:
            break
    if log_path:
        write_epoch_log(log_path, logs)
    return logs


def write_epoch_log(path: str, logs: list[EpochLog]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss,train_acc\n")
        for entry in logs:
            fh.write(f"{entry.epoch},{entry.loss!r},{entry.train_acc!r}\n")


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(model, path: str) -> None:
    """Magic "ASCK1", JSON header line, little-endian float32 blob."""
    items = model.state_items()
    header = {
        "arch": model.arch,
        "n_classes": model.n_classes,
        "kind": model.kind,
        "stats": None if model.stats is None else {
            "mean": list(map(float, model.stats[0])),
            "std": list(map(float, model.stats[1])),
        },
        "engine_version": ENGINE_VERSION,
        "registry": [[name, list(getattr(obj, attr).shape)]
                     for name, obj, attr in items],
    }
    blob = b"".join(
        np.ascontiguousarray(getattr(obj, attr), dtype="<f4").tobytes()
        for _, obj, attr in items
    )
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str):
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: bad header") from exc
        blob = fh.read()
    if header.get("engine_version") != ENGINE_VERSION:
        raise CheckpointError(
            f"{path}: engine version {header.get('engine_version')} != "
            f"{ENGINE_VERSION}")
    model = build_model(header["arch"], header["n_classes"])
    model.kind = header.get("kind")
    if header.get("stats") is not None:
        model.stats = (np.array(header["stats"]["mean"]),
                       np.array(header["stats"]["std"]))
    items = model.state_items()
    registry = header["registry"]
    if len(registry) != len(items):
        raise CheckpointError(f"{path}: registry length mismatch")
    expected_bytes = sum(int(np.prod(shape)) * 4 for _, shape in registry)
    if len(blob) != expected_bytes:
        raise CheckpointError(
            f"{path}: blob is {len(blob)} bytes, expected {expected_bytes}")
    pos = 0
    for (name, obj, attr), (reg_name, shape) in zip(items, registry):
        if name != reg_name or list(getattr(obj, attr).shape) != list(shape):
            raise CheckpointError(f"{path}: registry entry {reg_name} mismatch")
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(blob[pos:pos + size], dtype="<f4").reshape(shape)
        setattr(obj, attr, arr.copy())
        pos += size
        if attr == "running_mean":
            obj.updated = True
    # Param values were replaced wholesale; refresh grads to match
    for name, obj, attr in items:
        if attr == "value":
            obj.grad = np.zeros_like(obj.value)
    return model
