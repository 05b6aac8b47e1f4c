"""MagNet-style defense: autoencoder detectors, random reformers, calibration.

Score units
-----------
``recon_error`` detectors report the mean per-pixel squared error between x
and AE(x).  ``jsd`` detectors report the Jensen-Shannon divergence (natural
log, so at most ln 2) between softmax(Z(x)/T) and softmax(Z(AE(x))/T).

A score exactly equal to its threshold counts as benign.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import Autoencoder, Classifier

LN2 = math.log(2.0)


class NotCalibrated(RuntimeError):
    pass


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"jsd: {name} has negative entries")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1) > 1e-6):
        raise ValueError(f"jsd: {name} does not sum to 1 (sum={s})")


def jsd(p, q) -> float | np.ndarray:
    """Jensen-Shannon divergence 0.5 KL(p||m) + 0.5 KL(q||m), m = (p + q)/2.

    Works on single distributions or on rows of 2-D arrays.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"jsd: shapes differ {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        kp = np.where(p > 0, p * np.log(p / m), 0.0).sum(axis=-1)
        kq = np.where(q > 0, q * np.log(q / m), 0.0).sum(axis=-1)
    out = np.clip(0.5 * (kp + kq), 0.0, LN2)
    return float(out) if out.ndim == 0 else out


def jsd_tensor(p: T.Tensor, q: T.Tensor) -> T.Tensor:
    """Differentiable row-wise JSD of two (n, k) probability tensors."""
    m = (p + q) * 0.5
    logm = T.log(m)
    kp = T.sum(p * (T.log(p) - logm), axis=1)
    kq = T.sum(q * (T.log(q) - logm), axis=1)
    return (kp + kq) * 0.5


@dataclass
class Detector:
    """One MagNet detector: reconstruction error or temperature JSD."""

    kind: str
    autoencoder: Autoencoder
    threshold: float | None = None
    temperature: float | None = None
    classifier: Classifier | None = None

    def __post_init__(self):
        if self.kind not in ("recon_error", "jsd"):
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == "jsd":
            if self.temperature is None or self.temperature <= 0:
                raise ValueError("jsd detector needs a positive temperature")
            if self.classifier is None:
                raise ValueError("jsd detector needs the classifier")
        if self.threshold is not None and self.threshold < 0:
            raise ValueError("threshold must be >= 0")

    def score_tensor(self, x: T.Tensor, recon: T.Tensor | None = None) -> T.Tensor:
        """Per-instance scores (n,) as a differentiable tensor."""
        recon = self.autoencoder(x) if recon is None else recon
        if self.kind == "recon_error":
            per_pixel = float(np.prod(x.shape[1:]))
            return T.sq_norm(x - recon, axis=tuple(range(1, x.ndim))) / per_pixel
        t = self.temperature
        p = T.softmax(self.classifier.logits(x), temperature=t)
        q = T.softmax(self.classifier.logits(recon), temperature=t)
        return jsd_tensor(p, q)

    def scores(self, images: np.ndarray, batch_size: int = 2000) -> np.ndarray:
        images = np.asarray(images)
        if self.kind == "recon_error":
            recon = self.autoencoder.reconstruct(images, batch_size)
            diff = images.astype(np.float64) - recon
            return (diff ** 2).reshape(len(images), -1).mean(axis=1)
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                xb = images[i : i + batch_size]
                za = self.classifier.logits(xb).data.astype(np.float64)
                zb = self.classifier.logits(self.autoencoder(xb)).data.astype(np.float64)
                p = T._softmax_np(za / self.temperature, -1)
                q = T._softmax_np(zb / self.temperature, -1)
                out.append(jsd(p / p.sum(1, keepdims=True), q / q.sum(1, keepdims=True)))
        return np.concatenate(out) if out else np.zeros(0)


def detector_score(d: Detector, x) -> float:
    """Score of a single input (h, w, c)."""
    return float(d.scores(np.asarray(x)[None])[0])


def calibrate_threshold(scores, fpr: float) -> float:
    """Smallest observed score tau with #{s > tau} <= floor(fpr * n).

    This is the (1 - fpr) empirical quantile: the clean-set rejection rate is
    as large as possible without exceeding ``fpr``.
    """
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise ValueError("calibrate_threshold: no scores")
    if not 0 < fpr < 1:
        raise ValueError(f"calibrate_threshold: fpr must be in (0, 1), got {fpr}")
    allowed = int(math.floor(fpr * s.size + 1e-9))
    return float(s[s.size - allowed - 1])


def _shared_thresholds(scores: list[np.ndarray], fpr: float) -> list[float]:
    if not scores:
        return []
    n = len(scores[0])
    if n == 0:
        raise ValueError("calibrate: no validation scores")
    if not 0 < fpr < 1:
        raise ValueError(f"calibrate: fpr must be in (0, 1), got {fpr}")
    ordered = [np.sort(np.asarray(s, dtype=np.float64)) for s in scores]

    def at(k):
        taus = [float(s[n - k - 1]) for s in ordered]
        union = np.zeros(n, dtype=bool)
        for s, tau in zip(scores, taus):
            union |= s > tau
        return taus, union.mean()

    cap = int(math.floor(fpr * n + 1e-9))
    lo, hi = 0, cap  # union rate is nondecreasing in k; at k=0 it is 0
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if at(mid)[1] <= fpr:
            lo = mid
        else:
            hi = mid - 1
    return at(lo)[0]


@dataclass
class DefendedVerdict:
    detected: bool
    detector_index: int | None
    reformed: np.ndarray | None
    final_class: int | None


@dataclass
class DefensePipeline:
    detectors: list
    reformers: list
    classifier: Classifier
    seed: int = 0
    fpr: float | None = None
    calibration: list = field(default_factory=list)
    budget: str = "per_detector"

    def __post_init__(self):
        if not self.reformers:
            raise ValueError("a defense pipeline needs at least one reformer")

    @property
    def calibrated(self) -> bool:
        return all(d.threshold is not None for d in self.detectors)

    def require_calibrated(self) -> None:
        if not self.calibrated:
            raise NotCalibrated("defense pipeline has uncalibrated detectors")

    def calibrate(self, val_images: np.ndarray, fpr: float, budget: str = "per_detector") -> list[dict]:
        """Set every detector's threshold from clean validation images.

        ``per_detector``: each detector rejects at most ``fpr`` on its own.
        ``shared``: every detector uses the same number of allowed rejections,
        chosen as large as possible with the union rejecting at most ``fpr``.
        """
        if budget not in ("per_detector", "shared"):
            raise ValueError(f"unknown calibration budget {budget!r}")
        scores = [d.scores(val_images) for d in self.detectors]
        if budget == "per_detector":
            taus = [calibrate_threshold(s, fpr) for s in scores]
        else:
            taus = _shared_thresholds(scores, fpr)
        rows = []
        for i, (d, s, tau) in enumerate(zip(self.detectors, scores, taus)):
            d.threshold = tau
            rows.append({
                "detector": i,
                "kind": d.kind,
                "T": d.temperature,
                "tau": tau,
                "empirical_fpr": float(np.mean(s > tau)),
            })
        self.fpr = fpr
        self.budget = budget
        self.calibration = rows
        return rows

    def detect(self, images: np.ndarray) -> np.ndarray:
        """Index of the first firing detector per image, or -1."""
        self.require_calibrated()
        images = np.asarray(images)
        fired = np.full(len(images), -1)
        for i, d in enumerate(self.detectors):
            hit = (d.scores(images) > d.threshold) & (fired < 0)
            fired[hit] = i
        return fired

    def rejection_rate(self, images: np.ndarray) -> float:
        return float(np.mean(self.detect(images) >= 0))

    def classify(self, images: np.ndarray, rngs) -> tuple[np.ndarray, np.ndarray]:
        """Batched :func:`defend_classify`: (firing detector or -1, class or -1).

        ``rngs`` supplies one reformer-selection generator (or seed) per image.
        """
        images = np.asarray(images)
        fired = self.detect(images)
        classes = np.full(len(images), -1)
        choice = np.array([_pick(r, len(self.reformers)) for r in rngs], dtype=int)
        for j in np.unique(choice):
            idx = np.flatnonzero((choice == j) & (fired < 0))
            if len(idx):
                reformed = self.reformers[j].reconstruct(images[idx])
                classes[idx] = self.classifier.predict(reformed)
        return fired, classes


def _pick(rng, n: int) -> int:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return int(rng.integers(n))


def defend_classify(p: DefensePipeline, x, rng=None) -> DefendedVerdict:
    """Detect, then reform with one randomly chosen reformer, then classify."""
    p.require_calibrated()
    x = np.asarray(x)
    for i, d in enumerate(p.detectors):
        if detector_score(d, x) > d.threshold:
            return DefendedVerdict(True, i, None, None)
    j = _pick(p.seed if rng is None else rng, len(p.reformers))
    reformed = p.reformers[j].reconstruct(x[None])[0]
    return DefendedVerdict(False, None, reformed, int(p.classifier.predict(reformed)[0]))


def magnet_pipeline(classifier: Classifier, autoencoders: list, seed: int = 0,
                    jsd_temperatures=()) -> DefensePipeline:
    """Reconstruction-error detector and reformer per autoencoder, plus optional JSD detectors."""
    detectors = [Detector("recon_error", ae) for ae in autoencoders]
    for t in jsd_temperatures:
        detectors.append(Detector("jsd", autoencoders[0], temperature=float(t), classifier=classifier))
    return DefensePipeline(detectors, list(autoencoders), classifier, seed)


def write_calibration_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "kind", "T", "tau", "empirical_fpr"])
        for r in rows:
            w.writerow([r["detector"], r["kind"], "" if r["T"] is None else r["T"], repr(r["tau"]), repr(r["empirical_fpr"])])
