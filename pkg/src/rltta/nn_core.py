"""Small numpy network core: layers with hand-written backward passes,
softmax cross-entropy, Adam with decoupled weight decay, and a binary
checkpoint format.

Arrays are batched: dense/batchnorm/softmax take ``(N, F)``, conv and
pooling take ``(N, C, H, W)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"AGP1"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def check_input(self, in_shape: tuple) -> None:
        pass

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def _init_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def cast(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        self._init_grads()


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None, zero_init=False):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        if zero_init or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        self.params = {"W": w, "b": np.zeros(n_out)}
        self._init_grads()

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}

    def check_input(self, in_shape):
        if in_shape != (self.n_in,):
            raise ShapeError(f"expects ({self.n_in},), got {in_shape}")

    def output_shape(self, in_shape):
        return (self.n_out,)

    def forward(self, x, train):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, x, dy):
        self.grads["W"] = x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"].T


class Conv2d(Layer):
    """Stride-1 convolution with 'same' zero padding (odd kernel sizes)."""

    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, rng=None):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        fan_in = c_in * kernel * kernel
        if rng is None:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel))
        self.params = {"W": w, "b": np.zeros(c_out)}
        self._init_grads()

    def config(self):
        return {"c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel}

    def check_input(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeError(f"expects ({self.c_in}, H, W), got {in_shape}")

    def output_shape(self, in_shape):
        return (self.c_out, in_shape[1], in_shape[2])

    def forward(self, x, train):
        n, c, h, w = x.shape
        k, p = self.kernel, self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        # (N, C, H, W, k, k) -> (N*H*W, C*k*k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
        wmat = self.params["W"].reshape(self.c_out, -1)
        out = cols @ wmat.T + self.params["b"]
        out = out.reshape(n, h, w, self.c_out).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out), (cols, x.shape)

    def backward(self, cache, dy):
        cols, (n, c, h, w) = cache
        k, p = self.kernel, self.kernel // 2
        dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.grads["W"] = (dy_flat.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] = dy_flat.sum(axis=0)
        dcols = (dy_flat @ self.params["W"].reshape(self.c_out, -1)).reshape(n, h, w, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, mask, dy):
        return dy * mask


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling."""

    kind = "maxpool2d"

    def check_input(self, in_shape):
        if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
            raise ShapeError(f"expects (C, even H, even W), got {in_shape}")

    def output_shape(self, in_shape):
        return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)

    def forward(self, x, train):
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, cache, dy):
        idx, (n, c, h, w) = cache
        dblocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
        dblocks = dblocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dblocks.reshape(n, c, h, w)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, shape, dy):
        return dy.reshape(shape)


class BatchNorm(Layer):
    """Batch normalization over the feature axis of ``(N, F)`` inputs.

    Running statistics follow ``running = momentum * running + (1 - momentum) * batch``
    and are used, untouched, in inference mode.
    """

    kind = "batchnorm"

    def __init__(self, n_features: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.n_features, self.momentum, self.eps = n_features, momentum, eps
        self.params = {"gamma": np.ones(n_features), "beta": np.zeros(n_features)}
        self.buffers = {"running_mean": np.zeros(n_features), "running_var": np.ones(n_features)}
        self._init_grads()

    def config(self):
        return {"n_features": self.n_features, "momentum": self.momentum, "eps": self.eps}

    def check_input(self, in_shape):
        if in_shape != (self.n_features,):
            raise ShapeError(f"expects ({self.n_features},), got {in_shape}")

    def forward(self, x, train):
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        out = self.params["gamma"] * xhat + self.params["beta"]
        return out, (xhat, inv_std)

    def backward(self, cache, dy):
        xhat, inv_std = cache
        n = dy.shape[0]
        self.grads["gamma"] = (dy * xhat).sum(axis=0)
        self.grads["beta"] = dy.sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train):
        y = softmax(x)
        return y, y

    def backward(self, y, dy):
        return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, MaxPool2d, Flatten, BatchNorm, Softmax)}


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ForwardCache:
    mode: str
    version: int
    layer_caches: list
    owner: int


class Network:
    """Sequential stack of layers with a declared per-sample input shape."""

    def __init__(self, layers, input_shape, dtype=np.float32):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.version = 0
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                layer.check_input(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            shape = layer.output_shape(shape)
            layer.cast(self.dtype)
        self.output_shape = shape

    def forward(self, x, mode: str = "infer", upto: int | None = None):
        """Run the stack; ``upto`` stops after that many layers.

        Returns ``(output, cache)``; the cache is only usable for
        :meth:`backward` when ``mode == "train"``.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.layers[0].kind}): input shape {tuple(x.shape[1:])} "
                f"does not match declared {self.input_shape}")
        x = x.astype(self.dtype, copy=False)
        train = mode == "train"
        caches = []
        for layer in self.layers[:upto]:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, ForwardCache(mode, self.version, caches, id(self))

    def backward(self, cache: ForwardCache, dout):
        """Backpropagate ``dout``; returns per-layer gradient dicts and the input gradient."""
        if cache is None or not isinstance(cache, ForwardCache):
            raise StaleCacheError("missing forward cache")
        if cache.mode != "train":
            raise StaleCacheError("cache came from an infer-mode forward")
        if cache.owner != id(self) or cache.version != self.version:
            raise StaleCacheError("cache is stale (parameters changed since forward)")
        if len(cache.layer_caches) != len(self.layers):
            raise StaleCacheError("cache does not cover the whole network")
        d = np.asarray(dout, dtype=self.dtype)
        for layer, c in zip(reversed(self.layers), reversed(cache.layer_caches)):
            d = layer.backward(c, d)
        cache.mode = "consumed"
        return [dict(layer.grads) for layer in self.layers], d

    def parameters(self):
        """(layer index, name, array) for every trainable array, in a stable order."""
        return [(i, k, layer.params[k]) for i, layer in enumerate(self.layers) for k in sorted(layer.params)]

    def gradients(self):
        return [self.layers[i].grads[k] for i, k, _ in self.parameters()]

    def n_params(self) -> int:
        return sum(p.size for _, _, p in self.parameters())

    def copy(self) -> "Network":
        net = Network.from_manifest(self.manifest())
        net.load_state(self.state())
        return net

    def state(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.params[k] for k in sorted(layer.params)]
            out += [layer.buffers[k] for k in sorted(layer.buffers)]
        return out

    def load_state(self, arrays) -> None:
        arrays = list(arrays)
        pos = 0
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in sorted(store):
                    src = np.asarray(arrays[pos])
                    if src.shape != store[k].shape:
                        raise ShapeError(f"state entry {pos}: shape {src.shape} != {store[k].shape}")
                    store[k] = src.astype(self.dtype).copy()
                    pos += 1
        if pos != len(arrays):
            raise ShapeError(f"state has {len(arrays)} arrays, network needs {pos}")
        self.version += 1

    def manifest(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "dtype": self.dtype.name,
            "layers": [{"kind": l.kind, "config": l.config()} for l in self.layers],
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "Network":
        layers = []
        for spec in manifest["layers"]:
            try:
                layer_cls = LAYER_TYPES[spec["kind"]]
            except KeyError:
                raise CheckpointError(f"unknown layer kind {spec['kind']!r}") from None
            layers.append(layer_cls(**spec["config"]))
        return cls(layers, manifest["input_shape"], dtype=manifest.get("dtype", "float32"))


def cross_entropy(logits, label: int) -> float:
    """Single-sample softmax cross-entropy, accumulated in float64."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if not 0 <= int(label) < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    return float(-log_softmax(logits)[int(label)])


def softmax_cross_entropy(logits, labels):
    """Batched cross-entropy.

    Returns per-sample losses (float64) and the gradient of their mean with
    respect to ``logits`` (in the logits' dtype).
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError("labels must be one class index per row, within range")
    logp = log_softmax(logits.astype(np.float64))
    losses = -logp[np.arange(n), labels]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return losses, (grad / n).astype(logits.dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


class Adam:
    """Adam with bias correction followed by decoupled weight decay."""

    def __init__(self, network: Network, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-6):
        self.network = network
        self.state = AdamState(lr, betas[0], betas[1], eps, weight_decay)
        self.state.m = [np.zeros_like(p) for _, _, p in network.parameters()]
        self.state.v = [np.zeros_like(p) for _, _, p in network.parameters()]

    def step(self, grads=None) -> None:
        """Apply one update; ``grads`` defaults to the layers' accumulated gradients."""
        grads = self.network.gradients() if grads is None else grads
        adam_step(self.state, self.network.parameters(), grads)
        self.network.version += 1


def adam_step(state: AdamState, params, grads) -> None:
    """Update ``params`` in place. ``params`` is a list of arrays or of
    ``(layer, name, array)`` triples as returned by ``Network.parameters``."""
    arrays = [p[2] if isinstance(p, tuple) else p for p in params]
    if len(arrays) != len(grads):
        raise ShapeError(f"{len(arrays)} parameters but {len(grads)} gradients")
    for p, g in zip(arrays, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    if not state.m:
        state.m = [np.zeros_like(p) for p in arrays]
        state.v = [np.zeros_like(p) for p in arrays]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        if state.weight_decay:
            p -= (state.lr * state.weight_decay * p).astype(p.dtype)


# --- checkpoints -----------------------------------------------------------
#
# layout (little-endian):
#   "AGP1" | u16 version | u32 manifest length | manifest (UTF-8 JSON)
#   | u64 step counter | float32 payload in manifest order

def save_checkpoint(path, networks: dict, kind: str, step: int = 0, meta: dict | None = None) -> None:
    """Write named networks to ``path``; ``kind`` is recorded in the header."""
    manifest = {
        "kind": kind,
        "meta": meta or {},
        "networks": {name: net.manifest() for name, net in networks.items()},
        "order": list(networks),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob, struct.pack("<Q", step)]
    for name in networks:
        for arr in networks[name].state():
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    """Read a checkpoint; returns ``(networks, kind, step, meta)``."""
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise CheckpointError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, mlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 10
    if len(data) < pos + mlen + 8:
        raise CheckpointError(f"{path}: truncated manifest at byte {pos}")
    manifest = json.loads(data[pos:pos + mlen])
    pos += mlen
    (step,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    networks = {}
    for name in manifest["order"]:
        net = Network.from_manifest(manifest["networks"][name])
        arrays = []
        for ref in net.state():
            nbytes = ref.size * 4
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated payload at byte {pos}")
            arrays.append(np.frombuffer(data, dtype="<f4", count=ref.size, offset=pos).reshape(ref.shape))
            pos += nbytes
        net.load_state(arrays)
        networks[name] = net
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return networks, manifest["kind"], step, manifest["meta"]


def mlp(sizes, rng, zero_last=False, dtype=np.float32) -> Network:
    """Dense/ReLU stack; ``sizes`` lists input, hidden and output widths."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(Dense(a, b, rng=rng, zero_init=last and zero_last))
        if not last:
            layers.append(ReLU())
    return Network(layers, (sizes[0],), dtype=dtype)
