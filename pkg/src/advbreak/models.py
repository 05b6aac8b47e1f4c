"""Desk-scale differentiable models: classifier, autoencoder, preprocessor.

All images are NHWC float arrays in [0, 1].  Parameters are stored as named
float32 :class:`~advbreak.tensor.Tensor` objects so that models can be saved
bit-exactly and frozen for sharing between attack workers.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ACTIVATIONS = {"relu": T.relu, "brelu": T.brelu}


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Model:
    """Shared parameter bookkeeping for the three model kinds."""

    kind = "model"

    def __init__(self, params: dict[str, np.ndarray], input_shape: tuple, seed: int | None = None):
        self.params = {k: Tensor(np.asarray(v, dtype=np.float32)) for k, v in params.items()}
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = seed

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def architecture(self) -> dict:
        raise NotImplementedError

    def _check_input(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == len(self.input_shape):
            x = T.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.kind}: expected input (n, {self.input_shape}), got {x.shape}")
        return x


class Classifier(Model):
    """Two strided convolutions and two dense layers.

    conv 3x3x16 /2 -> act -> conv 3x3x32 /2 -> act -> dense 128 -> act -> dense K,
    with ``act`` either relu or brelu.
    """

    kind = "classifier"

    def __init__(self, params, input_shape=(28, 28, 1), num_classes: int = 10,
                 activation: str = "relu", seed=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected relu or brelu")
        super().__init__(params, input_shape, seed)
        self.num_classes = int(num_classes)
        self.activation = activation

    @classmethod
    def init(cls, seed: int, input_shape=(28, 28, 1), num_classes=10, activation="relu"):
        rng = np.random.default_rng(seed)
        h, w, c = input_shape
        h2, w2 = (h + 1) // 2, (w + 1) // 2
        h4, w4 = (h2 + 1) // 2, (w2 + 1) // 2
        flat = h4 * w4 * 32
        params = {
            "conv1.w": glorot(rng, (3, 3, c, 16), 9 * c, 9 * 16),
            "conv1.b": np.zeros(16, np.float32),
            "conv2.w": glorot(rng, (3, 3, 16, 32), 9 * 16, 9 * 32),
            "conv2.b": np.zeros(32, np.float32),
            "fc1.w": glorot(rng, (flat, 128), flat, 128),
            "fc1.b": np.zeros(128, np.float32),
            "fc2.w": glorot(rng, (128, num_classes), 128, num_classes),
            "fc2.b": np.zeros(num_classes, np.float32),
        }
        return cls(params, input_shape, num_classes, activation, seed)

    def architecture(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "activation": self.activation,
            "layers": ["conv3x3x16/2", self.activation, "conv3x3x32/2", self.activation,
                       "dense128", self.activation, f"dense{self.num_classes}"],
        }

    def logits(self, x) -> Tensor:
        """Z(x): pre-softmax scores, shape (n, K)."""
        x = self._check_input(x)
        act = ACTIVATIONS[self.activation]
        p = self.params
        h = act(T.conv2d(x, p["conv1.w"], stride=2, padding=1) + p["conv1.b"])
        h = act(T.conv2d(h, p["conv2.w"], stride=2, padding=1) + p["conv2.b"])
        h = T.reshape(h, (h.shape[0], -1))
        h = act(h @ p["fc1.w"] + p["fc1.b"])
        return h @ p["fc2.w"] + p["fc2.b"]

    __call__ = logits

    def probs(self, x) -> Tensor:
        return T.softmax(self.logits(x))

    def predict(self, x, batch_size: int = 1000) -> np.ndarray:
        """C(x) = argmax of the logits; ties go to the lowest class index."""
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        if x.ndim == len(self.input_shape):
            x = x[None]
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(np.argmax(self.logits(x[i : i + batch_size]).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, images, labels) -> float:
        return float(np.mean(self.predict(images) == np.asarray(labels)))


class LinearClassifier(Classifier):
    """Z(x) = x W + b on flattened input; the closed-form reference model."""

    kind = "linear"

    def __init__(self, params, input_shape=(2,), num_classes=2, activation="relu", seed=None):
        super().__init__(params, input_shape, num_classes, activation, seed)

    @classmethod
    def from_weights(cls, w, b, input_shape=None):
        w = np.asarray(w, dtype=np.float32)
        shape = (w.shape[0],) if input_shape is None else tuple(input_shape)
        return cls({"w": w, "b": np.asarray(b, dtype=np.float32)}, shape, w.shape[1])

    def architecture(self) -> dict:
        return {"kind": self.kind, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "activation": "none", "layers": ["dense"]}

    def logits(self, x) -> Tensor:
        x = self._check_input(x)
        return T.reshape(x, (x.shape[0], -1)) @ self.params["w"] + self.params["b"]

    __call__ = logits


class Autoencoder(Model):
    """Dense 784 -> 256 -> 64 -> 256 -> 784 with relu hidden units and sigmoid output."""

    kind = "autoencoder"
    widths = (256, 64, 256)

    @classmethod
    def init(cls, seed: int, input_shape=(28, 28, 1)):
        rng = np.random.default_rng(seed)
        d = int(np.prod(input_shape))
        sizes = (d,) + cls.widths + (d,)
        params = {}
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"fc{i + 1}.w"] = glorot(rng, (a, b), a, b)
            params[f"fc{i + 1}.b"] = np.zeros(b, np.float32)
        return cls(params, input_shape, seed)

    def architecture(self) -> dict:
        d = int(np.prod(self.input_shape))
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "layers": [d, *self.widths, d],
            "hidden": "relu",
            "output": "sigmoid",
        }

    def __call__(self, x) -> Tensor:
        x = self._check_input(x)
        n = x.shape[0]
        h = T.reshape(x, (n, -1))
        layers = len(self.widths) + 1
        for i in range(1, layers + 1):
            h = h @ self.params[f"fc{i}.w"] + self.params[f"fc{i}.b"]
            h = T.relu(h) if i < layers else T.sigmoid(h)
        return T.reshape(h, x.shape)

    def reconstruct(self, x, batch_size: int = 2000) -> np.ndarray:
        x = np.asarray(x)
        with T.no_grad():
            return np.concatenate([self(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)])


class Preprocessor(Autoencoder):
    """Input-shape-preserving projection G applied before classification."""

    kind = "preprocessor"


class Identity:
    """Stand-in reformer/preprocessor that returns its input unchanged."""

    kind = "identity"

    def __call__(self, x):
        return T.as_tensor(x)

    def reconstruct(self, x, batch_size: int = 0) -> np.ndarray:
        return np.asarray(x)


MODEL_KINDS = {c.kind: c for c in (Classifier, LinearClassifier, Autoencoder, Preprocessor)}


def build_model(architecture: dict, params: dict[str, np.ndarray], seed=None) -> Model:
    """Reconstruct a model object from an architecture descriptor and parameters."""
    kind = architecture.get("kind")
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    shape = tuple(architecture["input_shape"])
    if kind == "classifier":
        return Classifier(params, shape, architecture["num_classes"], architecture["activation"], seed)
    if kind == "linear":
        return LinearClassifier(params, shape, architecture["num_classes"], seed=seed)
    return MODEL_KINDS[kind](params, shape, seed)
