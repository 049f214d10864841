"""Minimal numpy MLPs with hand-written backprop, AdamW and a JSON model container."""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

MODEL_FORMAT = "chronocon-model"
MODEL_VERSION = 1


class MLP:
    """Fully connected net; hidden layers use ``activation``, the output is linear.

    All weights live in one flat vector ``params``; ``weights[i]`` and
    ``biases[i]`` are reshaped views into it, so in-place updates of
    ``params`` are visible through them.
    """

    def __init__(self, sizes, activation="relu", rng=None):
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs input and output sizes")
        self.activation = activation
        self.layout = []
        offset = 0
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.layout.append((f"W{i}", (fan_in, fan_out), offset))
            offset += fan_in * fan_out
            self.layout.append((f"b{i}", (fan_out,), offset))
            offset += fan_out
        self.params = np.zeros(offset)
        self._bind()
        if rng is not None:
            self.init(rng)

    def _bind(self):
        self.weights, self.biases = [], []
        for name, shape, off in self.layout:
            view = self.params[off:off + int(np.prod(shape))].reshape(shape)
            (self.weights if name[0] == "W" else self.biases).append(view)

    def init(self, rng):
        gain = 2.0 if self.activation == "relu" else 1.0
        for W, b in zip(self.weights, self.biases):
            W[...] = rng.standard_normal(W.shape) * np.sqrt(gain / W.shape[0])
            b[...] = 0.0

    @property
    def n_params(self):
        return self.params.size

    def named_arrays(self):
        return {name: self.params[off:off + int(np.prod(shape))].reshape(shape)
                for name, shape, off in self.layout}

    def copy(self):
        other = MLP(self.sizes, self.activation)
        other.params[...] = self.params
        return other

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def forward(self, x):
        h = np.asarray(x, dtype=float)
        cache = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == last else self._act(z)
            cache.append(h)
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Return (flat parameter gradient, gradient w.r.t. the input)."""
        grad = np.zeros_like(self.params)
        g = np.asarray(grad_out, dtype=float)
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            h_out, h_in = cache[i + 1], cache[i]
            if i != last:
                g = g * (h_out > 0) if self.activation == "relu" else g * (1.0 - h_out ** 2)
            _, wshape, woff = self.layout[2 * i]
            _, bshape, boff = self.layout[2 * i + 1]
            grad[woff:woff + wshape[0] * wshape[1]] = (h_in.T @ g).ravel()
            grad[boff:boff + bshape[0]] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grad, g


class AdamW:
    """Adam with decoupled weight decay, updating a flat vector in place."""

    def __init__(self, size, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad):
        if self.lr == 0.0:
            return
        self.t += 1
        params *= 1.0 - self.lr * self.weight_decay
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class ReduceLROnPlateau:
    """Scale optimizer learning rates by ``factor`` after ``patience`` stalled epochs."""

    def __init__(self, optimizers, factor=0.5, patience=5, threshold=1e-4, min_lr=0.0):
        self.optimizers = list(optimizers)
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.stalled = 0

    def step(self, metric):
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.stalled = 0
            return False
        self.stalled += 1
        if self.stalled > self.patience:
            for opt in self.optimizers:
                opt.lr = max(opt.lr * self.factor, self.min_lr)
            self.stalled = 0
            return True
        return False


def _encode(arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "dtype": "<f8",
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _decode(entry):
    if entry["dtype"] != "<f8":
        raise ValueError(f"unsupported dtype {entry['dtype']}")
    raw = base64.b64decode(entry["data"])
    return np.frombuffer(raw, dtype="<f8").astype(float).reshape(entry["shape"])


def dumps_arrays(arrays: dict, meta: dict) -> str:
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "meta": meta,
           "arrays": {name: _encode(a) for name, a in arrays.items()}}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_arrays(path, arrays: dict, meta: dict) -> None:
    Path(path).write_bytes(dumps_arrays(arrays, meta).encode("utf-8"))


def load_arrays(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError(f"{path}: not a {MODEL_FORMAT} file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    return {name: _decode(e) for name, e in doc["arrays"].items()}, doc["meta"]
