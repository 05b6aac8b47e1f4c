"""Desk-scale recipes for every model the experiments need, cached on disk.

Models are keyed by a hash of their full recipe, so changing any training
setting retrains instead of reusing a stale file.  The cache root is
``$ADVBREAK_CACHE`` or ``~/.cache/advbreak``.

Data comes from MNIST IDX files when ``$ADVBREAK_MNIST`` points at a directory
holding the four standard files, otherwise from the seeded synthetic digits.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .attacks import fgsm
from .data_io import Dataset, load_idx, load_model, save_dataset_idx, save_model
from .defenses import DefensePipeline, magnet_pipeline
from .digits import synthetic_digits
from .training import AETrainConfig, TrainConfig, train_autoencoder, train_classifier, train_preprocessor

RECIPE_VERSION = 1

N_TRAIN, N_VAL, N_TEST = 20000, 5000, 5000
DEFENDER_SEEDS = tuple(range(1000, 1016))
ATTACKER_SEEDS = tuple(range(2000, 2032))
DEFENDER_FPR = 0.001
ATTACKER_FPR = 0.01
GAUSSIAN_SIGMA = 0.3
FGSM_EPSILON = 0.3

CLASSIFIER_VARIANTS = {
    "unsecured": ("relu", 0.0),
    "brelu": ("brelu", 0.0),
    "gaussian": ("relu", GAUSSIAN_SIGMA),
    "gaussian+brelu": ("brelu", GAUSSIAN_SIGMA),
}

CLASSIFIER_TRAIN = TrainConfig(epochs=10, batch_size=64, lr=1e-3, seed=7)
AE_TRAIN = AETrainConfig(epochs=12, batch_size=64, lr=2e-3, ae_noise_sigma=0.1)
AE_SAMPLES = 10000
PREPROCESSOR_TRAIN = TrainConfig(epochs=8, batch_size=64, lr=1e-3, seed=11)
PREPROCESSOR_SAMPLES = 10000

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def cache_dir(root=None) -> Path:
    root = root or os.environ.get("ADVBREAK_CACHE") or Path.home() / ".cache" / "advbreak"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _key(recipe: dict) -> str:
    blob = json.dumps({"v": RECIPE_VERSION, **recipe}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _cached(name: str, recipe: dict, build, root=None):
    path = cache_dir(root) / f"{name}-{_key(recipe)}.advb"
    if path.exists():
        return load_model(path)
    model = build()
    save_model(model, path, train_config=recipe)
    return model


def load_splits(mnist_dir=None, n_train: int = N_TRAIN, n_val: int = N_VAL, n_test: int = N_TEST,
                cache=None, synthetic_seed: int = 1) -> tuple[Dataset, Dataset, Dataset]:
    """(train, validation, test); validation is the tail of the training file.

    With ``mnist_dir`` the four standard IDX files are read from it, otherwise
    synthetic digits are generated (and stored as IDX under ``cache`` if given).
    """
    if mnist_dir:
        d = Path(mnist_dir)
        full = load_idx(d / MNIST_FILES[0], d / MNIST_FILES[1], "train")
        test = load_idx(d / MNIST_FILES[2], d / MNIST_FILES[3], "test")
    else:
        def generate():
            return (synthetic_digits(n_train + n_val, seed=synthetic_seed),
                    synthetic_digits(n_test, seed=synthetic_seed + 1, split="test"))

        if cache is None:
            full, test = generate()
        else:
            tag = "" if synthetic_seed == 1 else f"-s{synthetic_seed}"
            base = Path(cache) / f"synthetic-{n_train + n_val}-{n_test}{tag}"
            base.mkdir(parents=True, exist_ok=True)
            paths = [base / f for f in MNIST_FILES]
            if not all(p.exists() for p in paths):
                full, test = generate()
                save_dataset_idx(full, paths[0], paths[1])
                save_dataset_idx(test, paths[2], paths[3])
            full = load_idx(paths[0], paths[1], "train")
            test = load_idx(paths[2], paths[3], "test")
    if n_train + n_val > len(full):
        raise ValueError(f"need {n_train + n_val} training-file images, have {len(full)}")
    train = full.subset(0, n_train)
    val = full.subset(len(full) - n_val, split="validation")
    return train, val, test.subset(0, n_test)


def desk_data(root=None) -> tuple[Dataset, Dataset, Dataset]:
    return load_splits(os.environ.get("ADVBREAK_MNIST"), cache=cache_dir(root))


def _data_tag() -> str:
    return os.environ.get("ADVBREAK_MNIST") or "synthetic"


def classifier(variant: str = "unsecured", root=None):
    activation, sigma = CLASSIFIER_VARIANTS[variant]
    cfg = TrainConfig(**{**CLASSIFIER_TRAIN.to_dict(), "augment_sigma": sigma})
    recipe = {"kind": "classifier", "activation": activation, "cfg": cfg.to_dict(), "data": _data_tag()}

    def build():
        train, val, _ = desk_data(root)
        return train_classifier(train, cfg, activation, val=val)

    return _cached(f"classifier-{variant.replace('+', '-')}", recipe, build, root)


def autoencoders(seeds, root=None) -> list:
    out = []
    for seed in seeds:
        cfg = AETrainConfig(**{**AE_TRAIN.to_dict(), "seed": int(seed)})
        recipe = {"kind": "autoencoder", "cfg": cfg.to_dict(), "n": AE_SAMPLES, "data": _data_tag()}

        def build(cfg=cfg):
            train, _, _ = desk_data(root)
            return train_autoencoder(train.images[:AE_SAMPLES], cfg)

        out.append(_cached(f"ae-{seed}", recipe, build, root))
    return out


def fgsm_pairs(model, images: np.ndarray, labels: np.ndarray, epsilon: float = FGSM_EPSILON,
               batch_size: int = 500) -> np.ndarray:
    return np.concatenate([fgsm(model, images[i : i + batch_size], labels[i : i + batch_size], epsilon)
                           for i in range(0, len(images), batch_size)])


def preprocessor(root=None):
    recipe = {"kind": "preprocessor", "cfg": PREPROCESSOR_TRAIN.to_dict(), "n": PREPROCESSOR_SAMPLES,
              "eps": FGSM_EPSILON, "classifier": _key({"c": CLASSIFIER_TRAIN.to_dict()}), "data": _data_tag()}

    def build():
        train, _, _ = desk_data(root)
        clf = classifier("unsecured", root)
        x = train.images[:PREPROCESSOR_SAMPLES]
        adv = fgsm_pairs(clf, x, train.labels[:PREPROCESSOR_SAMPLES])
        return train_preprocessor(adv, x, PREPROCESSOR_TRAIN)

    return _cached("preprocessor", recipe, build, root)


def defender_pipeline(clf=None, fpr: float = DEFENDER_FPR, jsd_temperatures=(), root=None) -> DefensePipeline:
    """16 reconstruction-error detectors/reformers calibrated on the validation split."""
    clf = clf or classifier("unsecured", root)
    pipe = magnet_pipeline(clf, autoencoders(DEFENDER_SEEDS, root), seed=1, jsd_temperatures=jsd_temperatures)
    _, val, _ = desk_data(root)
    pipe.calibrate(val.images, fpr)
    return pipe


def attacker_pipeline(clf=None, fpr: float = ATTACKER_FPR, root=None) -> DefensePipeline:
    """The attacker's local copy: 32 autoencoders with thresholds at 1% FPR."""
    clf = clf or classifier("unsecured", root)
    pipe = magnet_pipeline(clf, autoencoders(ATTACKER_SEEDS, root), seed=2)
    _, val, _ = desk_data(root)
    pipe.calibrate(val.images, fpr)
    return pipe
