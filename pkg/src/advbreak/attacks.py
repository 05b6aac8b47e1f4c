"""Gradient-based attacks: FGSM, targeted L2 penalty attack, attack-through-preprocessor, grey-box ensemble.

All optimisation attacks share one batched engine.  Instances in a batch are
independent: each has its own penalty constants, its own Adam moments and its
own early-abort state, and the summed objective has a block-diagonal gradient.

The box constraint is enforced by clipping x' to [0, 1] after every step.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .models import Identity
from .training import make_optimizer

_MASK = 1e6


@dataclass
class AttackConfig:
    iterations: int = 1000
    lr: float = 1e-2
    kappa: float = 0.0
    binary_steps: int = 6
    c_lo: float = 1e-3
    c_hi: float = 1e2
    initial_c: float | None = None  # default: geometric midpoint of [c_lo, c_hi]
    d_lo: float = 1e-1
    d_hi: float = 1e5
    initial_d: float = 1e2
    optimizer: str = "adam"
    abort_early: bool = True
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.binary_steps < 1:
            raise ValueError("iterations and binary_steps must be >= 1")
        if not 0 < self.c_lo < self.c_hi:
            raise ValueError("need 0 < c_lo < c_hi")
        if not 0 < self.d_lo <= self.d_hi:
            raise ValueError("need 0 < d_lo <= d_hi")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def start_c(self) -> float:
        return self.initial_c if self.initial_c is not None else math.sqrt(self.c_lo * self.c_hi)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    achieved_class: int
    distortion: float
    target: int
    c: float
    d: float | None = None
    detector_flags: list = field(default_factory=list)


def cw_inner_loss(logits, target, kappa: float = 0.0):
    """max(max_{i != t} Z_i - Z_t, -kappa), row-wise for (n, K) logits."""
    z = T.as_tensor(logits)
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, -1))
    target = np.atleast_1d(np.asarray(target))
    if np.any(target >= z.shape[1]) or np.any(target < 0):
        raise ValueError(f"target {target} out of range for {z.shape[1]} classes")
    onehot = np.eye(z.shape[1], dtype=z.dtype)[target]
    other = T.max(z - onehot * _MASK, axis=1)
    real = T.sum(z * onehot, axis=1)
    loss = T.clamp(other - real, lo=-kappa)
    return T.reshape(loss, ()) if single else loss


def _margin(z: np.ndarray, target: np.ndarray) -> np.ndarray:
    real = z[np.arange(len(z)), target]
    other = np.where(np.eye(z.shape[1], dtype=bool)[target], -np.inf, z).max(axis=1)
    return real - other


def _hits(z: np.ndarray, target: np.ndarray, kappa: float) -> np.ndarray:
    if kappa > 0:
        return _margin(z, target) >= kappa
    return np.argmax(z, axis=1) == target


def fgsm(model, x, true_label, epsilon: float) -> np.ndarray:
    """clip(x + eps * sign(grad_x CE(F(x), y)), 0, 1); batched over leading axis."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == len(model.input_shape)
    xb = x[None] if single else x
    y = np.atleast_1d(np.asarray(true_label))
    xv = T.Tensor(xb.copy(), requires_grad=True)
    logp = T.log_softmax(model.logits(xv))
    loss = T.sum(logp * -np.eye(model.num_classes, dtype=np.float32)[y])
    T.backward(loss)
    out = np.clip(xb + epsilon * np.sign(xv.grad), 0, 1).astype(np.float32)
    return out[0] if single else out


# --- objectives -----------------------------------------------------------


class _ClassifierObjective:
    """Z(G(x')) margin loss; G defaults to the identity."""

    has_detectors = False

    def __init__(self, model, kappa: float, preprocessor=None):
        self.model = model
        self.kappa = kappa
        self.pre = preprocessor or Identity()

    def __call__(self, xv, target):
        z = self.model.logits(self.pre(xv))
        lc = cw_inner_loss(z, target, self.kappa)
        ok = _hits(z.data, target, self.kappa)
        return lc, None, ok, np.zeros(len(target)), [np.argmax(z.data, axis=1)]

    def verify(self, x, target):
        with T.no_grad():
            _, _, ok, _, classes = self(T.Tensor(x), target)
        return ok, classes[0], [[] for _ in range(len(x))]


class _EnsembleObjective:
    """Sum of margin losses over reformers plus hinge of detector scores over thresholds."""

    def __init__(self, model, reformers, detectors, kappa: float):
        self.model = model
        self.reformers = list(reformers)
        self.detectors = [d for d in detectors if d.threshold is None or math.isfinite(d.threshold)]
        if any(d.threshold is None for d in self.detectors):
            raise ValueError("grey-box attack needs calibrated local detectors")
        self.kappa = kappa
        if not self.reformers:
            raise ValueError("grey-box attack needs at least one reformer")

    @property
    def has_detectors(self) -> bool:
        return bool(self.detectors)

    def __call__(self, xv, target):
        n = len(target)
        cache = {}

        def recon(ae):
            if id(ae) not in cache:
                cache[id(ae)] = ae(xv)
            return cache[id(ae)]

        reformed = [recon(r) for r in self.reformers]
        stacked = reformed[0] if len(reformed) == 1 else T.concat(reformed, axis=0)
        z = self.model.logits(stacked)
        tiled = np.tile(target, len(reformed))
        margins = cw_inner_loss(z, tiled, self.kappa)
        if len(reformed) == 1:
            lc = margins
        else:
            lc = T.sum(T.reshape(margins, (len(reformed), n)), axis=0)
        hits = _hits(z.data, tiled, self.kappa).reshape(len(reformed), n)
        classes = np.argmax(z.data, axis=1).reshape(len(reformed), n)
        ld, ld_val = None, np.zeros(n)
        if self.detectors:
            over = [T.clamp(d.score_tensor(xv, recon(d.autoencoder)) - d.threshold, lo=0.0)
                    for d in self.detectors]
            stack = T.reshape(T.concat(over, axis=0), (len(over), n))
            ld = T.sum(stack, axis=0)
            ld_val = ld.data.astype(np.float64)
            self._flags = stack.data > 0
        else:
            self._flags = np.zeros((0, n), dtype=bool)
        return lc, ld, hits.all(axis=0), ld_val, list(classes)

    def verify(self, x, target):
        with T.no_grad():
            _, _, ok, ld_val, classes = self(T.Tensor(x), target)
        flags = self._flags.T.tolist()
        return ok & (ld_val <= 0), classes[0], flags


# --- engine ---------------------------------------------------------------


def _optimize(objective, x: np.ndarray, target: np.ndarray, cfg: AttackConfig, trace=None):
    """Binary-searched penalty optimisation over a batch of instances."""
    x = np.asarray(x, dtype=np.float32)
    target = np.asarray(target, dtype=np.int64)
    n = len(x)
    axes = tuple(range(1, x.ndim))
    lo = np.full(n, cfg.c_lo)
    hi = np.full(n, cfg.c_hi)
    c = np.full(n, cfg.start_c)
    d = np.full(n, float(cfg.initial_d))
    best_dist = np.full(n, np.inf)
    best_x = x.copy()
    best_c = np.full(n, np.nan)
    best_d = np.full(n, np.nan)
    last_x = x.copy()
    check_every = max(cfg.iterations // 10, 1)

    for step in range(cfg.binary_steps):
        xv = T.Tensor(x.copy(), requires_grad=True)
        opt = make_optimizer(cfg.optimizer, [xv], cfg.lr)
        cls_success = np.zeros(n, dtype=bool)
        last_ld = np.zeros(n)
        last_loss = np.zeros(n)
        prev = np.full(n, np.inf)
        active = np.ones(n, dtype=bool)
        c32 = c.astype(np.float32)
        d32 = d.astype(np.float32)
        for it in range(cfg.iterations):
            lc, ld, ok, ld_val, _ = objective(xv, target)
            dist = T.sq_norm(xv - x, axis=axes)
            per = dist + lc * c32
            if ld is not None:
                per = per + ld * d32
            loss = T.sum(per)
            per_val = per.data.astype(np.float64)
            cur = np.sqrt(((xv.data.astype(np.float64) - x) ** 2).sum(axis=axes))

            live = active
            cls_success |= ok & live
            last_ld = np.where(live, ld_val, last_ld)
            last_loss = np.where(live, per_val, last_loss)
            win = live & ok & (ld_val <= 0) & (cur < best_dist)
            if win.any():
                best_dist[win] = cur[win]
                best_x[win] = xv.data[win]
                best_c[win] = c[win]
                best_d[win] = d[win]

            if cfg.abort_early and it % check_every == 0 and it > 0:
                stalled = per_val > prev * 0.9999
                active = active & ~stalled
                prev = np.where(active, per_val, prev)
                if not active.any():
                    T.current_tape().clear()
                    break
            elif cfg.abort_early and it == 0:
                prev = per_val.copy()

            frozen = xv.data[~active].copy() if not active.all() else None
            T.backward(loss)
            opt.step()
            np.clip(xv.data, 0.0, 1.0, out=xv.data)
            if frozen is not None:
                xv.data[~active] = frozen

        last_x = xv.data.copy()
        if trace is not None:
            for i in range(n):
                trace.append({"outer_step": step, "instance": i, "c": float(c[i]), "d": float(d[i]),
                              "loss": float(last_loss[i]), "best_distortion": float(best_dist[i])})
        hi = np.where(cls_success, c, hi)
        lo = np.where(cls_success, lo, c)
        c = np.sqrt(lo * hi)
        if objective.has_detectors:
            d = np.clip(np.where(last_ld > 0, d * 2, d / 2), cfg.d_lo, cfg.d_hi)

    found = np.isfinite(best_dist)
    x_out = np.where(found.reshape((-1,) + (1,) * len(axes)), best_x, last_x).astype(np.float32)
    ok, achieved, flags = objective.verify(x_out, target)
    results = []
    for i in range(n):
        dist = float(np.sqrt(((x_out[i].astype(np.float64) - x[i]) ** 2).sum()))
        results.append(AttackResult(
            x_adv=x_out[i],
            success=bool(found[i] and ok[i]),
            achieved_class=int(achieved[i]),
            distortion=dist,
            target=int(target[i]),
            c=float(best_c[i] if found[i] else c[i]),
            d=(float(best_d[i] if found[i] else d[i]) if objective.has_detectors else None),
            detector_flags=flags[i],
        ))
    return results


def _batched(objective, x, target, cfg, trace=None):
    x = np.asarray(x, dtype=np.float32)
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    out = []
    for lo in range(0, len(x), cfg.batch_size):
        sub = None if trace is None else []
        out.extend(_optimize(objective, x[lo : lo + cfg.batch_size], target[lo : lo + cfg.batch_size], cfg, sub))
        if trace is not None:
            for row in sub:
                row["instance"] += lo
            trace.extend(sub)
    return out


def _run(objective, model, x, target, cfg, trace):
    cfg = cfg or AttackConfig()
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == len(model.input_shape)
    res = _batched(objective, x[None] if single else x, np.atleast_1d(target), cfg, trace)
    return res[0] if single else res


def cw_l2(model, x, target, cfg: AttackConfig | None = None, trace=None):
    """Targeted L2 penalty attack with box clipping and log-space search over c.

    ``x`` may be one image or a batch; returns one :class:`AttackResult` or a
    list.  Success means C(x') = t (with margin kappa when kappa > 0); among all
    successful iterates the one with the smallest L2 distortion is returned.
    """
    kappa = (cfg or AttackConfig()).kappa
    return _run(_ClassifierObjective(model, kappa), model, x, target, cfg, trace)


def cw_l2_through_preprocessor(model, preprocessor, x, target, cfg: AttackConfig | None = None,
                               trace=None):
    """Targeted L2 attack on the composition Z(G(x')); success judged on C(G(x'))."""
    kappa = (cfg or AttackConfig()).kappa
    return _run(_ClassifierObjective(model, kappa, preprocessor), model, x, target, cfg, trace)


def greybox_ensemble_attack(reformers, detectors, model, x, target, cfg: AttackConfig | None = None,
                            trace=None):
    """Attack a local copy of a detector/reformer defense.

    Minimises ||x'-x||^2 + c * sum_j max(max_{i!=t} Z(R_j(x'))_i - Z(R_j(x'))_t, -kappa)
    + d * sum_j max(D_j(x') - tau_j, 0).  c follows the usual log-space bisection
    on classifier success (all reformers agree on t); d doubles while the
    detector term is positive at the end of an inner run and halves otherwise.
    Detectors with an infinite threshold are ignored.
    """
    kappa = (cfg or AttackConfig()).kappa
    return _run(_EnsembleObjective(model, reformers, detectors, kappa), model, x, target, cfg, trace)


def write_trace_csv(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance", "outer_step", "c", "d", "loss", "best_distortion"])
        for r in trace:
            w.writerow([r["instance"], r["outer_step"], repr(r["c"]), repr(r["d"]), repr(r["loss"]),
                        repr(r["best_distortion"])])
