"""Procedurally generated 28x28 handwritten-digit look-alikes.

Each class is a small set of pen strokes (polylines in a unit box).  Every
sample jitters the control points, applies a random affine map and stroke
width, and renders the strokes with an anti-aliased distance falloff into the
central 20x20 region, as in MNIST.  Generation is fully determined by the seed.
"""

from __future__ import annotations

import numpy as np

from .data_io import Dataset

SIZE = 28
BOX = 20


def _arc(cx, cy, rx, ry, start, stop, n=14):
    t = np.radians(np.linspace(start, stop, n))
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(*pts):
    return np.asarray(pts, dtype=float)


# angles in degrees, y axis pointing down (90 = bottom of a circle)
STROKES = {
    0: [_arc(0.5, 0.5, 0.28, 0.42, 0, 360, 24)],
    1: [_line((0.36, 0.22), (0.52, 0.08), (0.52, 0.92))],
    2: [np.vstack([_arc(0.5, 0.32, 0.25, 0.22, 190, 380, 12),
                   _line((0.66, 0.5), (0.25, 0.9), (0.8, 0.9))])],
    3: [np.vstack([_arc(0.48, 0.3, 0.24, 0.2, 200, 450, 12),
                   _arc(0.48, 0.7, 0.26, 0.2, 270, 520, 12)])],
    4: [_line((0.62, 0.92), (0.62, 0.08), (0.2, 0.64), (0.82, 0.64))],
    5: [np.vstack([_line((0.76, 0.1), (0.32, 0.1), (0.29, 0.45)),
                   _arc(0.48, 0.65, 0.26, 0.24, 225, 490, 14)])],
    6: [np.vstack([_line((0.7, 0.1)), _arc(0.62, 0.62, 0.36, 0.52, 250, 180, 6),
                   _arc(0.5, 0.68, 0.24, 0.22, 180, 540, 18)])],
    7: [_line((0.2, 0.1), (0.8, 0.1), (0.42, 0.92))],
    8: [_arc(0.5, 0.29, 0.19, 0.19, 0, 360, 16), _arc(0.5, 0.7, 0.23, 0.21, 0, 360, 18)],
    9: [np.vstack([_arc(0.5, 0.32, 0.22, 0.21, 0, 360, 18), _line((0.72, 0.34), (0.62, 0.92))])],
}


def _segments(strokes):
    starts, ends = [], []
    for s in strokes:
        starts.append(s[:-1])
        ends.append(s[1:])
    return np.vstack(starts), np.vstack(ends)


def _render(a: np.ndarray, b: np.ndarray, width: np.ndarray, peak: np.ndarray) -> np.ndarray:
    """Render batches of segments (B, S, 2) in pixel coordinates."""
    ys, xs = np.mgrid[0:SIZE, 0:SIZE]
    pix = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)  # (P, 2)
    d = b - a  # (B, S, 2)
    p = pix[None, :, None, :] - a[:, None, :, :]  # (B, P, S, 2)
    len2 = np.maximum((d * d).sum(-1), 1e-9)[:, None, :]
    t = np.clip((p * d[:, None]).sum(-1) / len2, 0, 1)
    dist = np.sqrt(((p - t[..., None] * d[:, None]) ** 2).sum(-1)).min(axis=2)  # (B, P)
    ink = np.clip(width[:, None] / 2 + 0.5 - dist, 0, 1) * peak[:, None]
    return ink.reshape(-1, SIZE, SIZE)


def _sample(label: int, count: int, rng: np.random.Generator) -> np.ndarray:
    a0, b0 = _segments(STROKES[label])
    out = np.empty((count, SIZE, SIZE), dtype=np.float32)
    for lo in range(0, count, 256):
        n = min(256, count - lo)
        # jitter control points, shared between a segment's endpoints
        pts = np.concatenate([a0, b0[-1:]])
        jitter = rng.normal(0, 0.025, size=(n,) + pts.shape)
        a = a0[None] + jitter[:, : len(a0)]
        b = b0[None] + jitter[:, 1 : len(a0) + 1]
        ang = np.radians(rng.uniform(-12, 12, n))
        shear = rng.uniform(-0.25, 0.25, n)
        sx = rng.uniform(0.75, 1.08, n)
        sy = rng.uniform(0.88, 1.08, n)
        cos, sin = np.cos(ang), np.sin(ang)
        m = np.empty((n, 2, 2))
        m[:, 0, 0] = sx * cos
        m[:, 0, 1] = sx * (shear * cos - sin)
        m[:, 1, 0] = sy * sin
        m[:, 1, 1] = sy * (shear * sin + cos)
        shift = rng.uniform(-1.5, 1.5, size=(n, 1, 2))
        centre = SIZE / 2

        def place(q):
            q = (q - 0.5) @ m.transpose(0, 2, 1)
            return q * BOX + centre + shift

        width = rng.uniform(1.6, 3.0, n)
        peak = rng.uniform(0.85, 1.0, n)
        out[lo : lo + n] = _render(place(a), place(b), width, peak)
    return out


def synthetic_digits(count: int, seed: int, split: str = "train") -> Dataset:
    """Generate ``count`` labelled digit images (N, 28, 28, 1) in [0, 1]."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=count)
    images = np.zeros((count, SIZE, SIZE), dtype=np.float32)
    for k in range(10):
        idx = np.flatnonzero(labels == k)
        if len(idx):
            images[idx] = _sample(k, len(idx), rng)
    # round-trip through bytes so the synthetic set matches what IDX storage holds
    images = np.round(images * 255) / 255
    return Dataset(images[..., None].astype(np.float32), labels.astype(np.int64), split, f"synthetic:{seed}")
