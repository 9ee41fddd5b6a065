"""Small CNN real/fake classifier: the environment the RL agent acts on."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import nn_core as nc

REAL, FAKE = 0, 1

# inference runs one image per forward: BLAS results for a row depend on the
# batch it sits in, and rewards/TTA scores must not
EVAL_CHUNK = 1


@dataclass
class ClassifierConfig:
    input_size: int = 32
    channels: int = 3
    feature_dim: int = 64
    conv_channels: tuple = (8, 16)
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 12

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.input_size % 4 or not 8 <= self.input_size <= 256:
            raise ValueError("input_size must be a multiple of 4 in [8, 256]")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


def build_network(config: ClassifierConfig, seed: int) -> nc.Network:
    rng = np.random.default_rng(seed)
    c1, c2 = config.conv_channels
    s = config.input_size // 4
    layers = [
        nc.Conv2d(config.channels, c1, 3, rng=rng), nc.ReLU(), nc.MaxPool2d(),
        nc.Conv2d(c1, c2, 3, rng=rng), nc.ReLU(), nc.MaxPool2d(),
        nc.Flatten(), nc.BatchNorm(c2 * s * s),
        nc.Dense(c2 * s * s, config.feature_dim, rng=rng), nc.ReLU(),
        nc.Dense(config.feature_dim, 2, rng=rng),
    ]
    return nc.Network(layers, (config.channels, config.input_size, config.input_size))


def to_input(images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    return x.transpose(0, 3, 1, 2).astype(np.float32) / np.float32(127.5) - np.float32(1.0)


class ClassifierModel:
    def __init__(self, network: nc.Network, config: ClassifierConfig):
        self.network = network
        self.config = config
        self._feature_upto = len(network.layers) - 1

    @classmethod
    def create(cls, config: ClassifierConfig | None = None, seed: int = 0) -> "ClassifierModel":
        config = config or ClassifierConfig()
        return cls(build_network(config, seed), config)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _check(self, images):
        x = np.asarray(images)
        if x.ndim == 3:
            x = x[None]
        want = (self.config.input_size, self.config.input_size, self.config.channels)
        if x.ndim != 4 or x.shape[1:] != want:
            raise nc.ShapeError(f"image shape {x.shape[1:]} does not match model input {want}")
        return x

    def _run(self, images, upto=None):
        x = self._check(images)
        outs = []
        for i in range(0, len(x), EVAL_CHUNK):
            out, _ = self.network.forward(to_input(x[i:i + EVAL_CHUNK]), "infer", upto=upto)
            outs.append(out)
        return np.concatenate(outs) if outs else np.zeros((0, 2), np.float32)

    def logits(self, images) -> np.ndarray:
        return self._run(images)

    def features(self, images) -> np.ndarray:
        """Penultimate (post-ReLU) activations, ``(N, feature_dim)``."""
        return self._run(images, upto=self._feature_upto)

    def features_and_loss(self, image, label: int):
        """Feature map and cross-entropy of one image from a single forward pass."""
        feats = self.features(image)
        head = self.network.layers[-1]
        logits, _ = head.forward(feats, False)
        return feats[0], float(nc.softmax_cross_entropy(logits, [label])[0][0])

    def probas(self, images) -> np.ndarray:
        """Fake-class probability per image."""
        return nc.softmax(self.logits(images).astype(np.float64))[:, FAKE]

    def losses(self, images, labels) -> np.ndarray:
        logits = self.logits(images)
        return nc.softmax_cross_entropy(logits, np.asarray(labels, dtype=np.int64))[0]

    # single-image forms
    def predict_proba(self, image) -> float:
        return float(self.probas(image)[0])

    def feature_map(self, image) -> np.ndarray:
        return self.features(image)[0]

    def loss_of(self, image, label: int) -> float:
        return float(self.losses(image, [label])[0])

    def save(self, path, meta: dict | None = None) -> None:
        nc.save_checkpoint(path, {"model": self.network}, kind="classifier",
                           meta={"config": asdict(self.config), **(meta or {})})

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        nets, kind, _, meta = nc.load_checkpoint(path)
        if kind != "classifier":
            raise nc.CheckpointError(f"{path}: expected a classifier checkpoint, found {kind!r}")
        return cls(nets["model"], ClassifierConfig(**meta["config"]))


def predict_proba(model: ClassifierModel, image) -> float:
    return model.predict_proba(image)


def feature_map(model: ClassifierModel, image) -> np.ndarray:
    return model.feature_map(image)


def loss_of(model: ClassifierModel, image, label: int) -> float:
    return model.loss_of(image, label)


def train(model: ClassifierModel, images, labels, epochs: int | None = None,
          batch_size: int | None = None, seed: int = 0) -> list[EpochRecord]:
    """Mini-batch Adam on cross-entropy; returns one record per epoch."""
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = batch_size or cfg.batch_size
    x = model._check(images)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty training set")
    if len(np.unique(y)) < 2:
        raise ValueError("training set must contain both real and fake images")
    net = model.network
    opt = nc.Adam(net, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A5]))
    log = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total, correct = 0.0, 0
        for i in range(0, len(x), batch_size):
            idx = order[i:i + batch_size]
            if len(idx) < 2:  # batchnorm needs a batch
                continue
            out, cache = net.forward(to_input(x[idx]), "train")
            losses, dlogits = nc.softmax_cross_entropy(out, y[idx])
            net.backward(cache, dlogits)
            opt.step()
            total += float(losses.sum())
            correct += int((out.argmax(axis=1) == y[idx]).sum())
        log.append(EpochRecord(epoch + 1, total / len(x), correct / len(x)))
    return log


def write_log_csv(log: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "accuracy"])
        for r in log:
            w.writerow([r.epoch, f"{r.loss:.8f}", f"{r.accuracy:.6f}"])
