"""Optimizers and training loops for classifiers, autoencoders and preprocessors."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import Autoencoder, Classifier, Preprocessor
from .tensor import NonFiniteError, Tensor


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    augment_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.augment_sigma < 0:
            raise ValueError("augment_sigma must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AETrainConfig(TrainConfig):
    ae_noise_sigma: float = 0.1

    def __post_init__(self):
        super().__post_init__()
        if self.ae_noise_sigma < 0:
            raise ValueError("ae_noise_sigma must be >= 0")


@dataclass
class History:
    """Per-epoch training curve."""

    rows: list = field(default_factory=list)
    train_accuracy: float | None = None
    val_accuracy: float | None = None

    def add(self, epoch: int, train_loss: float, val: float | None) -> None:
        self.rows.append((epoch, train_loss, val))

    @property
    def train_loss(self) -> list[float]:
        return [r[1] for r in self.rows]

    @property
    def val(self) -> list[float]:
        return [r[2] for r in self.rows]

    def write_csv(self, path, val_name: str = "val") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", val_name])
            for epoch, loss, val in self.rows:
                w.writerow([epoch, repr(loss), "" if val is None else repr(val)])


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad
                p.grad = None


class Adam:
    """Adam with bias correction; state is per parameter element."""

    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.grad = None


def make_optimizer(kind: str, params, lr: float):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def gaussian_augment(x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """x + N(0, sigma^2) i.i.d. per pixel, clamped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return x
    noisy = x + rng.normal(0.0, sigma, size=x.shape).astype(x.dtype)
    return np.clip(noisy, 0.0, 1.0)


def _train_rng(seed: int) -> np.random.Generator:
    # separate stream from weight init, which consumes default_rng(seed)
    return np.random.default_rng([seed, 1])


def _images(data):
    return data.images if hasattr(data, "images") else np.asarray(data)


def train_classifier(train, cfg: TrainConfig, activation: str = "relu", val=None,
                     log=None) -> Classifier:
    """Cross-entropy training; noise is redrawn every epoch when augment_sigma > 0.

    ``train``/``val`` are :class:`~advbreak.data_io.Dataset` objects.  The
    returned model carries a ``history`` attribute with the loss curve and the
    final clean train/validation accuracy, and is frozen (not trainable).
    """
    x, y = train.images, train.labels
    model = Classifier.init(cfg.seed, x.shape[1:], int(max(y.max() + 1, 2)), activation)
    model.set_trainable(True)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    rng = _train_rng(cfg.seed)
    onehot = np.eye(model.num_classes, dtype=np.float32)
    hist = History()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x))
        total = 0.0
        try:
            for i in range(0, len(x), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                xb = gaussian_augment(x[idx], cfg.augment_sigma, rng)
                logp = T.log_softmax(model.logits(xb))
                loss = T.mean(T.sum(logp * -onehot[y[idx]], axis=1))
                T.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
        except NonFiniteError as err:
            T.current_tape().clear()
            raise TrainingDiverged(f"classifier training diverged in epoch {epoch}: {err}") from err
        val_acc = model.accuracy(val.images, val.labels) if val is not None else None
        hist.add(epoch, total / len(x), val_acc)
        if log:
            log(f"epoch {epoch}: loss={total / len(x):.4f} val_acc={val_acc}")
    model.set_trainable(False)
    hist.train_accuracy = model.accuracy(x, y)
    hist.val_accuracy = hist.val[-1]
    model.history = hist
    return model


def reconstruction_error(model, images: np.ndarray) -> float:
    """Mean per-pixel squared error of ``model`` on ``images``."""
    recon = model.reconstruct(images)
    return float(np.mean((recon.astype(np.float64) - images) ** 2))


def _fit_reconstruction(model, inputs, targets, cfg, noise_sigma, val, log, what):
    model.set_trainable(True)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr)
    rng = _train_rng(cfg.seed)
    hist = History()
    n = len(inputs)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        try:
            for i in range(0, n, cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                xb = gaussian_augment(inputs[idx], noise_sigma, rng)
                loss = T.mean(T.sq_norm(model(xb) - targets[idx], axis=(1, 2, 3))) / float(np.prod(xb.shape[1:]))
                T.backward(loss)
                opt.step()
                total += loss.item() * len(idx)
        except NonFiniteError as err:
            T.current_tape().clear()
            raise TrainingDiverged(f"{what} training diverged in epoch {epoch}: {err}") from err
        val_mse = val(model) if val is not None else None
        hist.add(epoch, total / n, val_mse)
        if log:
            log(f"{what} epoch {epoch}: mse={total / n:.5f} val={val_mse}")
    model.set_trainable(False)
    model.history = hist
    return model


def train_autoencoder(data, cfg: AETrainConfig, seed: int | None = None, val=None,
                      log=None) -> Autoencoder:
    """Denoising reconstruction training: corrupt inputs, reconstruct clean targets.

    ``seed`` (defaulting to ``cfg.seed``) fixes both the initial weights and the
    batch/noise stream, so distinct seeds give distinct autoencoders.
    """
    seed = cfg.seed if seed is None else seed
    if seed != cfg.seed:
        cfg = AETrainConfig(**{**cfg.to_dict(), "seed": seed})
    x = _images(data)
    model = Autoencoder.init(seed, x.shape[1:])
    check = (lambda m: reconstruction_error(m, _images(val))) if val is not None else None
    return _fit_reconstruction(model, x, x, cfg, cfg.ae_noise_sigma, check, log, "autoencoder")


def train_preprocessor(adversarial: np.ndarray, clean: np.ndarray, cfg: TrainConfig,
                       val=None, log=None) -> Preprocessor:
    """Fit G so that G(x_fgsm) and G(x_clean) both reconstruct x_clean.

    ``val`` may be an ``(adversarial, clean)`` pair of held-out arrays; the
    recorded validation value is then the mean of the two reconstruction MSEs.
    """
    adversarial, clean = np.asarray(adversarial), np.asarray(clean)
    if adversarial.shape != clean.shape:
        raise ValueError(f"pair shapes differ: {adversarial.shape} vs {clean.shape}")
    inputs = np.concatenate([adversarial, clean])
    targets = np.concatenate([clean, clean])
    model = Preprocessor.init(cfg.seed, clean.shape[1:])
    check = None
    if val is not None:
        va, vc = val
        check = lambda m: 0.5 * (float(np.mean((m.reconstruct(va) - vc) ** 2)) + reconstruction_error(m, vc))  # noqa: E731
    return _fit_reconstruction(model, inputs, targets, cfg, 0.0, check, log, "preprocessor")
