"""Experiment protocols: white-box L2, grey-box MagNet transfer, preprocessor attack.

Conventions written into every report:

* instances are the first ``instances`` rows of the evaluation set, in file order;
* targets are drawn uniformly from the incorrect classes with ``target_seed``;
* mean distortion averages ||x' - x||_2 over successful instances only;
* in grey-box runs an instance whose clean input the defender already rejects
  counts as a failure, and the defender picks its reformer with
  ``default_rng([pipeline.seed, instance_index])``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, cw_l2, cw_l2_through_preprocessor, greybox_ensemble_attack
from .data_io import Dataset, emit_image_grid, write_idx
from .defenses import DefensePipeline

PROTOCOLS = ("whitebox", "greybox", "preproc")

NOTES = {
    "instances": "first N rows of the evaluation split, unshuffled",
    "targets": "uniform over incorrect classes, seeded by target_seed",
    "mean_distortion": "L2 over successful instances only; null when none succeed",
    "greybox_clean_rejected": "instances whose clean input is rejected by the defender count as failures",
    "greybox_reformer_rng": "default_rng([defender seed, instance index])",
    "calibration_budget": "per-detector false-positive rate unless stated otherwise",
}


@dataclass
class EvalProtocol:
    kind: str = "whitebox"
    instances: int = 100
    start: int = 0
    target_seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    ensemble_size: int = 32
    defender_size: int = 16
    attacker_fpr: float = 0.01
    defender_fpr: float = 0.001

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.kind!r}; expected one of {PROTOCOLS}")
        if self.instances < 1:
            raise ValueError("instance count must be >= 1")
        if self.start < 0:
            raise ValueError("start must be >= 0")
        for name in ("attacker_fpr", "defender_fpr"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InstanceRecord:
    index: int
    label: int
    target: int
    success: bool
    distortion: float
    achieved_class: int
    detected_by: int | None = None
    clean_rejected: bool = False
    local_success: bool | None = None
    recovered_distortion: float | None = None


@dataclass
class EvalReport:
    protocol: str
    config: dict
    records: list
    aggregates: dict
    notes: dict = field(default_factory=lambda: dict(NOTES))
    adversarial: np.ndarray | None = field(default=None, repr=False)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.config)

    def to_json(self) -> str:
        doc = {
            "protocol": self.protocol,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "aggregates": self.aggregates,
            "notes": self.notes,
            "records": [asdict(r) for r in self.records],
        }
        return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = [f.name for f in InstanceRecord.__dataclass_fields__.values()]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.records:
            w.writerow(["" if getattr(r, c) is None else _cell(getattr(r, c)) for c in cols])
        return buf.getvalue()


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_report(report: EvalReport, path) -> dict[str, Path]:
    """Write ``path`` (JSON), a sibling ``.csv`` and, if present, ``.adv.idx`` images."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    out = {"json": path, "csv": path.with_suffix(".csv")}
    out["csv"].write_text(report.to_csv())
    if report.adversarial is not None:
        out["adversarial"] = path.with_suffix(".adv.idx")
        write_idx(out["adversarial"], report.adversarial.astype(np.float32))
    return out


def load_report(path) -> EvalReport:
    text = Path(path).read_text()
    if not text.strip():
        raise ValueError(f"{path}: empty report file")
    doc = json.loads(text)
    for key in ("protocol", "config", "records", "aggregates"):
        if key not in doc:
            raise ValueError(f"{path}: report lacks {key!r}")
    records = [InstanceRecord(**r) for r in doc["records"]]
    return EvalReport(doc["protocol"], doc["config"], records, doc["aggregates"], doc.get("notes", {}))


# --- metrics --------------------------------------------------------------


def compute_metrics(records) -> dict:
    """Success rate and mean L2 distortion over successful records."""
    records = list(records)
    if not records:
        raise ValueError("compute_metrics: no records")
    wins = [r.distortion for r in records if r.success]
    agg = {
        "instances": len(records),
        "successes": len(wins),
        "success_rate": len(wins) / len(records),
        "mean_distortion": float(np.mean(wins)) if wins else None,
    }
    recovered = [r.recovered_distortion for r in records if r.success and r.recovered_distortion is not None]
    if recovered:
        agg["mean_recovered_distortion"] = float(np.mean(recovered))
    local = [r.local_success for r in records if r.local_success is not None]
    if local:
        agg["local_success_rate"] = float(np.mean(local))
    rejected = [r.clean_rejected for r in records]
    if any(rejected):
        agg["clean_rejected"] = int(np.sum(rejected))
    return agg


def aggregate(records) -> dict:
    """:func:`compute_metrics` plus a ``defined`` flag; an empty record list is allowed."""
    if not records:
        return {"instances": 0, "successes": 0, "success_rate": None, "mean_distortion": None,
                "defined": False}
    return {**compute_metrics(records), "defined": True}


def distortion_ratios(reports: dict, baseline: str = "unsecured") -> dict:
    """Mean distortion of every report divided by the baseline's."""
    base = reports[baseline].aggregates["mean_distortion"]
    out = {}
    for name, rep in reports.items():
        m = rep.aggregates.get("mean_distortion")
        out[name] = None if (m is None or not base) else m / base
    return out


def choose_targets(labels, seed: int, num_classes: int = 10) -> np.ndarray:
    """One target per label, uniform over the other ``num_classes - 1`` classes."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    offset = rng.integers(1, num_classes, size=len(labels))
    return (labels + offset) % num_classes


# --- protocol runners -----------------------------------------------------


def _instances(data: Dataset, protocol: EvalProtocol):
    stop = protocol.start + protocol.instances
    x = data.images[protocol.start : stop]
    y = data.labels[protocol.start : stop]
    idx = np.arange(protocol.start, protocol.start + len(x))
    return x, y, idx


def _parallel(attack, x, targets, cfg: AttackConfig, workers: int):
    """Run ``attack(x, t, cfg)`` over fixed chunks of cfg.batch_size, in index order.

    Chunk boundaries never depend on ``workers``, so results do not either.
    """
    chunks = [(lo, min(lo + cfg.batch_size, len(x))) for lo in range(0, len(x), cfg.batch_size)]

    def job(span):
        lo, hi = span
        return attack(x[lo:hi], targets[lo:hi], cfg)

    if workers <= 1 or len(chunks) <= 1:
        parts = [job(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, chunks))
    return [r for part in parts for r in part]


def _report(kind, config, records, adversarial) -> EvalReport:
    adv = np.stack(adversarial) if len(adversarial) else None
    return EvalReport(kind, config, records, aggregate(records), adversarial=adv)


def _base_config(protocol: EvalProtocol, data: Dataset, **extra) -> dict:
    return {"protocol": protocol.to_dict(), "data": {"source": data.source, "split": data.split}, **extra}


def run_whitebox_eval(classifier, data: Dataset, protocol: EvalProtocol, variant: str = "unsecured",
                      workers: int = 1) -> EvalReport:
    """Targeted L2 attack (cw_l2) against the classifier itself."""
    x, y, idx = _instances(data, protocol)
    targets = choose_targets(y, protocol.target_seed, classifier.num_classes)
    results = _parallel(lambda a, t, c: cw_l2(classifier, a, t, c), x, targets, protocol.attack, workers)
    records = [InstanceRecord(int(i), int(l), int(r.target), r.success, r.distortion, r.achieved_class)
               for i, l, r in zip(idx, y, results)]
    config = _base_config(protocol, data, variant=variant, classifier=classifier.architecture())
    return _report("whitebox", config, records, [r.x_adv for r in results])


def run_preprocessor_eval(classifier, preprocessor, data: Dataset, protocol: EvalProtocol,
                          workers: int = 1) -> EvalReport:
    """Targeted L2 attack through G; also records ||G(x') - x||_2 for the distance comparison."""
    x, y, idx = _instances(data, protocol)
    targets = choose_targets(y, protocol.target_seed, classifier.num_classes)
    results = _parallel(lambda a, t, c: cw_l2_through_preprocessor(classifier, preprocessor, a, t, c),
                        x, targets, protocol.attack, workers)
    adv = np.stack([r.x_adv for r in results]) if results else np.zeros((0,) + x.shape[1:], np.float32)
    recovered = preprocessor.reconstruct(adv) if len(adv) else adv
    rec = np.sqrt(((recovered.astype(np.float64) - x) ** 2).reshape(len(x), -1).sum(axis=1))
    records = [InstanceRecord(int(i), int(l), int(r.target), r.success, r.distortion, r.achieved_class,
                              recovered_distortion=float(d))
               for i, l, r, d in zip(idx, y, results, rec)]
    config = _base_config(protocol, data, classifier=classifier.architecture(),
                          preprocessor=getattr(preprocessor, "kind", "custom"))
    return _report("preproc", config, records, list(adv))


def judge(pipeline: DefensePipeline, clean: np.ndarray, adversarial: np.ndarray, targets, indices):
    """Defender verdicts: (clean rejected, firing detector or -1, final class or -1, success)."""
    pipeline.require_calibrated()
    clean_fired = pipeline.detect(clean) if len(clean) else np.zeros(0, int)
    rngs = [np.random.default_rng([pipeline.seed, int(i)]) for i in indices]
    fired, classes = pipeline.classify(adversarial, rngs) if len(adversarial) else (np.zeros(0, int),) * 2
    targets = np.asarray(targets)
    success = (clean_fired < 0) & (fired < 0) & (classes == targets)
    return clean_fired >= 0, fired, classes, success


def run_greybox_eval(attacker: DefensePipeline, defender: DefensePipeline, data: Dataset,
                     protocol: EvalProtocol, workers: int = 1) -> EvalReport:
    """Attack the attacker's local copy; judge each x' on the defender's pipeline."""
    attacker.require_calibrated()
    defender.require_calibrated()
    x, y, idx = _instances(data, protocol)
    targets = choose_targets(y, protocol.target_seed, attacker.classifier.num_classes)
    results = _parallel(
        lambda a, t, c: greybox_ensemble_attack(attacker.reformers, attacker.detectors, attacker.classifier,
                                                a, t, c),
        x, targets, protocol.attack, workers)
    adv = np.stack([r.x_adv for r in results]) if results else np.zeros((0,) + x.shape[1:], np.float32)
    rejected, fired, classes, success = judge(defender, x, adv, targets, idx)
    records = [
        InstanceRecord(int(i), int(l), int(t), bool(s), r.distortion, int(c),
                       detected_by=None if f < 0 else int(f), clean_rejected=bool(rj), local_success=r.success)
        for i, l, t, s, r, c, f, rj in zip(idx, y, targets, success, results, classes, fired, rejected)
    ]
    config = _base_config(protocol, data, classifier=attacker.classifier.architecture(),
                          attacker={"reformers": len(attacker.reformers), "detectors": len(attacker.detectors),
                                    "fpr": attacker.fpr, "seed": attacker.seed},
                          defender={"reformers": len(defender.reformers), "detectors": len(defender.detectors),
                                    "fpr": defender.fpr, "seed": defender.seed, "budget": defender.budget})
    return _report("greybox", config, records, list(adv))


# --- figures --------------------------------------------------------------


def first_of_each_class(data: Dataset, num_classes: int = 10) -> np.ndarray:
    """Index of the first instance of every class, in class order."""
    out = []
    for k in range(num_classes):
        hit = np.flatnonzero(data.labels == k)
        if not len(hit):
            raise ValueError(f"no instance of class {k}")
        out.append(int(hit[0]))
    return np.asarray(out)


def source_target_images(attack, data: Dataset, num_classes: int = 10) -> np.ndarray:
    """(K*K, h, w, c) grid content: row = source class, column = target class.

    ``attack(x, targets)`` returns adversarial images; diagonal cells hold the
    unmodified source.
    """
    src = data.images[first_of_each_class(data, num_classes)]
    xs = np.repeat(src, num_classes, axis=0)
    ts = np.tile(np.arange(num_classes), num_classes)
    off = ts != np.repeat(np.arange(num_classes), num_classes)
    out = xs.copy()
    out[off] = attack(xs[off], ts[off])
    return out


def emit_source_target_grid(attack, data: Dataset, path, num_classes: int = 10) -> Path:
    images = source_target_images(attack, data, num_classes)
    return emit_image_grid(np.clip(images, 0, 1), num_classes, num_classes, path)


def summary_markdown(report: EvalReport) -> str:
    agg = report.aggregates

    def fmt(v):
        if v is None:
            return "n/a"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = [f"# {report.protocol} evaluation", "", f"config fingerprint `{report.fingerprint[:16]}`", "",
             "| metric | value |", "|---|---|"]
    for key in sorted(agg):
        lines.append(f"| {key} | {fmt(agg[key])} |")
    lines += ["", "Conventions:", ""] + [f"- {k}: {v}" for k, v in sorted(report.notes.items())]
    return "\n".join(lines) + "\n"

