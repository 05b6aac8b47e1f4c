"""Command-line pipeline: train, calibrate, attack, evaluate, report.

Exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 runtime failure.
Failures print one line to stderr: ``advbreak: error[<kind>]: <message>``.
The default output directory is ``$ADVBREAK_OUT`` (else ``./advbreak-out``).

Pipeline files are JSON documents::

    {"classifier": "classifier.advb", "autoencoders": ["ae-1000.advb", ...],
     "seed": 1, "jsd_temperatures": []}

Relative paths resolve against the pipeline file's directory.  ``calibrate``
writes thresholds next to it as ``<name>.thresholds.json``; later commands
pick that file up automatically.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .data_io import IDXError, ModelFileError, emit_image_grid, load_model, read_idx, save_model
from .defenses import NotCalibrated, magnet_pipeline, write_calibration_csv
from .evaluation import (EvalReport, InstanceRecord, aggregate, load_report, run_greybox_eval, run_preprocessor_eval,
                         run_whitebox_eval, summary_markdown, write_report)
from .models import Classifier, Preprocessor
from .training import TrainingDiverged, train_autoencoder, train_classifier, train_preprocessor
from .zoo import fgsm_pairs, load_splits

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _missing(path) -> CLIError:
    return CLIError(EXIT_MISSING, "missing_artifact", f"{path} does not exist")


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise _missing(path)
    return path


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _artifact(path) -> dict:
    """Path-independent identity of an input file, for report fingerprints."""
    return {"file": Path(path).name, "sha256": _sha(path)}


# --- shared loading -------------------------------------------------------


def _config(args) -> dict:
    overrides = dict(C.parse_assignment(s) for s in getattr(args, "set", None) or [])
    if getattr(args, "config", None):
        _need(args.config)
    return C.load_config(getattr(args, "config", None), overrides)


def _outdir(cfg, args) -> Path:
    out = C.output_dir(cfg, getattr(args, "out_dir", None))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _splits(cfg, out: Path):
    d = C.section(cfg, "data")
    if d["mnist_dir"]:
        _need(d["mnist_dir"])
    return load_splits(d["mnist_dir"], d["n_train"], d["n_val"], d["n_test"], cache=out / "data-cache",
                       synthetic_seed=d["synthetic_seed"])


def _load_model(path, kind=None):
    model = load_model(_need(path))
    if kind is not None and not isinstance(model, kind):
        raise CLIError(EXIT_CONFIG, "config", f"{path} holds a {model.kind}, expected {kind.kind}")
    return model


def thresholds_path(pipeline_path) -> Path:
    p = Path(pipeline_path)
    return p.with_name(p.stem + ".thresholds.json")


def load_pipeline(path, calibrated: bool = True):
    path = _need(path)
    try:
        doc = json.loads(path.read_text())
        clf_path = path.parent / doc["classifier"]
        ae_paths = [path.parent / a for a in doc["autoencoders"]]
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise CLIError(EXIT_CONFIG, "config", f"{path}: malformed pipeline file ({err})") from err
    clf = _load_model(clf_path, Classifier)
    aes = [_load_model(a) for a in ae_paths]
    pipe = magnet_pipeline(clf, aes, seed=int(doc.get("seed", 0)),
                           jsd_temperatures=doc.get("jsd_temperatures", []))
    ident = {"pipeline": path.name, "classifier": _artifact(clf_path),
             "autoencoders": [_artifact(a) for a in ae_paths]}
    tpath = thresholds_path(path)
    if tpath.exists():
        t = json.loads(tpath.read_text())
        if len(t["rows"]) != len(pipe.detectors):
            raise CLIError(EXIT_CONFIG, "config", f"{tpath}: {len(t['rows'])} thresholds for "
                                                  f"{len(pipe.detectors)} detectors")
        for d, row in zip(pipe.detectors, t["rows"]):
            d.threshold = float(row["tau"])
        pipe.fpr, pipe.budget, pipe.calibration = t["fpr"], t["budget"], t["rows"]
        ident["thresholds"] = _artifact(tpath)
    if calibrated:
        pipe.require_calibrated()
    return pipe, ident


# --- subcommands ----------------------------------------------------------


def cmd_defaults(args) -> int:
    print(json.dumps(C.DEFAULTS, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    over = {}
    if args.brelu:
        over["train.activation"] = "brelu"
    if args.sigma is not None:
        over["train.augment_sigma"] = args.sigma
    cfg = _config(args)
    cfg.update({k: C.coerce(k, v) for k, v in over.items()})
    out = _outdir(cfg, args)
    train, val, test = _splits(cfg, out)
    tc = C.train_config(cfg)
    activation = cfg["train.activation"]
    if activation not in ("relu", "brelu"):
        raise CLIError(EXIT_CONFIG, "config", f"train.activation must be relu or brelu, got {activation!r}")
    model = train_classifier(train, tc, activation, val=val, log=_log)
    path = Path(args.out) if args.out else out / "classifier.advb"
    save_model(model, path, {**C.section(cfg, "train"), "data": C.section(cfg, "data")})
    model.history.write_csv(path.with_suffix(".history.csv"), "val_accuracy")
    _log(f"test accuracy {model.accuracy(test.images, test.labels):.4f}")
    print(path)
    return EXIT_OK


def cmd_train_ae(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg, args)
    if args.count < 1:
        raise CLIError(EXIT_CONFIG, "config", "--count must be >= 1")
    train, _, _ = _splits(cfg, out)
    x = train.images[: cfg["ae.samples"]]
    names = []
    for seed in range(args.seed_base, args.seed_base + args.count):
        ae = train_autoencoder(x, C.ae_config(cfg, seed), log=_log)
        path = save_model(ae, out / f"ae-{seed}.advb", {**C.section(cfg, "ae"), "seed": seed})
        names.append(path.name)
        print(path)
    if args.classifier:
        clf = Path(args.classifier)
        _need(clf)
        doc = {"classifier": str(Path(clf).resolve()) if clf.parent.resolve() != out.resolve() else clf.name,
               "autoencoders": names, "seed": args.pipeline_seed,
               "jsd_temperatures": cfg["calibrate.jsd_temperatures"]}
        ppath = out / f"pipeline-{args.seed_base}.json"
        ppath.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        print(ppath)
    return EXIT_OK


def cmd_train_preprocessor(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg, args)
    clf = _load_model(args.classifier, Classifier)
    train, val, _ = _splits(cfg, out)
    n, eps = cfg["preproc.samples"], cfg["fgsm.epsilon"]
    x, y = train.images[:n], train.labels[:n]
    adv = fgsm_pairs(clf, x, y, eps)
    vx = val.images[:1000]
    vadv = fgsm_pairs(clf, vx, val.labels[:1000], eps)
    g = train_preprocessor(adv, x, C.preproc_config(cfg), val=(vadv, vx), log=_log)
    path = Path(args.out) if args.out else out / "preprocessor.advb"
    save_model(g, path, {**C.section(cfg, "preproc"), "fgsm.epsilon": eps, "classifier": _sha(args.classifier)})
    g.history.write_csv(path.with_suffix(".history.csv"), "val_mse")
    print(path)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg, args)
    pipe, _ = load_pipeline(args.pipeline, calibrated=False)
    _, val, _ = _splits(cfg, out)
    budget = args.budget or cfg["calibrate.budget"]
    try:
        rows = pipe.calibrate(val.images, args.fpr, budget)
    except ValueError as err:
        raise CLIError(EXIT_CONFIG, "config", str(err)) from err
    tpath = thresholds_path(args.pipeline)
    doc = {"fpr": args.fpr, "budget": budget, "validation": val.source, "rows": rows}
    tpath.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_calibration_csv(rows, tpath.with_suffix(".csv"))
    print(tpath)
    return EXIT_OK


def _eval_split(cfg, out):
    _, _, test = _splits(cfg, out)
    return test


def _fgsm_report(cfg, clf, data, proto, ident) -> EvalReport:
    stop = proto.start + proto.instances
    x, y = data.images[proto.start : stop], data.labels[proto.start : stop]
    adv = fgsm_pairs(clf, x, y, cfg["fgsm.epsilon"]) if len(x) else x
    pred = clf.predict(adv) if len(x) else np.zeros(0, int)
    dist = np.sqrt(((adv.astype(np.float64) - x) ** 2).reshape(len(x), -1).sum(axis=1))
    records = [InstanceRecord(int(proto.start + i), int(l), int(l), bool(p != l), float(d), int(p))
               for i, (l, p, d) in enumerate(zip(y, pred, dist))]
    config = {"protocol": proto.to_dict(), "epsilon": cfg["fgsm.epsilon"], "success": "untargeted",
              "data": {"source": data.source, "split": data.split}, **ident}
    return EvalReport("fgsm", config, records, aggregate(records), adversarial=adv)


def _run_protocol(kind, args, cfg, out) -> EvalReport:
    data = _eval_split(cfg, out)
    workers = max(1, args.workers)
    if kind in ("cw", "whitebox"):
        clf = _load_model(_req(args, "classifier"), Classifier)
        rep = run_whitebox_eval(clf, data, C.protocol(cfg, "whitebox"), variant=clf.activation, workers=workers)
        rep.config["classifier_file"] = _artifact(args.classifier)
    elif kind == "fgsm":
        clf = _load_model(_req(args, "classifier"), Classifier)
        rep = _fgsm_report(cfg, clf, data, C.protocol(cfg, "whitebox"),
                           {"classifier_file": _artifact(args.classifier)})
    elif kind == "preproc":
        clf = _load_model(_req(args, "classifier"), Classifier)
        g = _load_model(_req(args, "preprocessor"), Preprocessor)
        rep = run_preprocessor_eval(clf, g, data, C.protocol(cfg, "preproc"), workers=workers)
        rep.config.update(classifier_file=_artifact(args.classifier), preprocessor_file=_artifact(args.preprocessor))
    elif kind == "greybox":
        attacker, aid = load_pipeline(_req(args, "attacker_pipeline" if args.command == "evaluate" else "pipeline"))
        defender, did = (load_pipeline(_req(args, "pipeline")) if args.command == "evaluate" else (attacker, aid))
        rep = run_greybox_eval(attacker, defender, data, C.protocol(cfg, "greybox"), workers=workers)
        rep.config.update(attacker_files=aid, defender_files=did)
        if args.command == "attack":
            rep.notes["success"] = "judged on the attacker's own pipeline"
    else:  # pragma: no cover - argparse restricts choices
        raise CLIError(EXIT_CONFIG, "config", f"unknown kind {kind!r}")
    return rep


def _req(args, name):
    value = getattr(args, name, None)
    if not value:
        raise CLIError(EXIT_CONFIG, "config", f"--{name.replace('_', '-')} is required here")
    return value


def cmd_attack(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg, args)
    rep = _run_protocol(args.kind, args, cfg, out)
    rep.config["run"] = {"command": "attack", "kind": args.kind, "settings": cfg}
    paths = write_report(rep, Path(args.out) if args.out else out / f"attack-{args.kind}.json")
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _outdir(cfg, args)
    rep = _run_protocol(args.protocol, args, cfg, out)
    rep.config["run"] = {"command": "evaluate", "protocol": args.protocol, "settings": cfg}
    paths = write_report(rep, Path(args.out) if args.out else out / f"eval-{args.protocol}.json")
    agg = rep.aggregates
    _log(f"success_rate={agg['success_rate']} mean_distortion={agg['mean_distortion']}")
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    path = _need(args.eval)
    try:
        rep = load_report(path)
    except (ValueError, TypeError, json.JSONDecodeError) as err:
        raise CLIError(EXIT_RUNTIME, "bad_report", f"{path}: {err}") from err
    if not rep.records:
        raise CLIError(EXIT_RUNTIME, "bad_report", f"{path}: report has no instances")
    outputs = {path.with_suffix(".summary.md"): summary_markdown(rep).encode()}
    if args.figures:
        adv_path = path.with_suffix(".adv.idx")
        if not adv_path.exists():
            raise _missing(adv_path)
        adv = np.clip(read_idx(adv_path), 0, 1)[: args.max_images]
        cols = min(args.columns, len(adv))
        rows = -(-len(adv) // cols)
        outputs[path.with_suffix(".grid.pgm")] = adv, rows, cols
    for target, content in outputs.items():  # everything is prepared before anything is written
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            emit_image_grid(content[0], content[1], content[2], target)
        print(target)
    return EXIT_OK


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="advbreak", description="Train defenses and attack them.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, text):
        p = sub.add_parser(name, help=text, description=text, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    def common(p, workers=False):
        p.add_argument("--config", default=None, help="JSON config file with namespaced keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                       help="override one config key (repeatable)")
        p.add_argument("--out-dir", default=None, help=f"output directory (else output.dir, ${C.OUTPUT_ENV})")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="parallel attack workers")

    command("defaults", cmd_defaults, "print every config key with its default")

    p = command("train-classifier", cmd_train_classifier, "train a classifier")
    common(p)
    p.add_argument("--brelu", action="store_true", help="use bounded-relu activations")
    p.add_argument("--sigma", type=float, default=None,
                   help="Gaussian augmentation std (0.3 is the defended setting); overrides train.augment_sigma")
    p.add_argument("--out", default=None, help="model file path (default <out-dir>/classifier.advb)")

    p = command("train-ae", cmd_train_ae, "train autoencoders with consecutive seeds")
    common(p)
    p.add_argument("--count", type=int, default=16, help="number of autoencoders (32 attacker / 16 defender)")
    p.add_argument("--seed-base", type=int, default=1000, help="seed of the first autoencoder")
    p.add_argument("--classifier", default=None, help="also write a pipeline file using this classifier")
    p.add_argument("--pipeline-seed", type=int, default=0, help="reformer-selection seed in the pipeline file")

    p = command("train-preprocessor", cmd_train_preprocessor, "train a preprocessor on FGSM pairs")
    common(p)
    p.add_argument("--classifier", required=True, help="classifier used to craft the FGSM pairs")
    p.add_argument("--out", default=None, help="model file path (default <out-dir>/preprocessor.advb)")

    p = command("calibrate", cmd_calibrate, "set detector thresholds on the validation split")
    common(p)
    p.add_argument("--pipeline", required=True, help="pipeline JSON file")
    p.add_argument("--fpr", type=float, default=0.001, help="false-positive rate per detector")
    p.add_argument("--budget", choices=("per_detector", "shared"), default=None,
                   help="threshold budget; unset means calibrate.budget")

    p = command("attack", cmd_attack, "attack evaluation instances and dump adversarial images")
    common(p, workers=True)
    p.add_argument("--kind", choices=("cw", "fgsm", "greybox", "preproc"), required=True, help="attack")
    p.add_argument("--classifier", default=None, help="classifier model file")
    p.add_argument("--preprocessor", default=None, help="preprocessor model file (preproc)")
    p.add_argument("--pipeline", default=None, help="calibrated local pipeline (greybox)")
    p.add_argument("--out", default=None, help="result JSON path (default <out-dir>/attack-<kind>.json)")

    p = command("evaluate", cmd_evaluate, "run an evaluation protocol and write a report")
    common(p, workers=True)
    p.add_argument("--protocol", choices=("greybox", "whitebox", "preproc"), required=True, help="protocol")
    p.add_argument("--classifier", default=None, help="classifier model file (whitebox, preproc)")
    p.add_argument("--preprocessor", default=None, help="preprocessor model file (preproc)")
    p.add_argument("--pipeline", default=None, help="defender pipeline (greybox)")
    p.add_argument("--attacker-pipeline", default=None, help="attacker's local pipeline (greybox)")
    p.add_argument("--out", default=None, help="report JSON path (default <out-dir>/eval-<protocol>.json)")

    p = command("report", cmd_report, "summarise an evaluation report")
    p.add_argument("--eval", required=True, help="report JSON written by evaluate or attack")
    p.add_argument("--figures", action="store_true", help="also emit a PGM grid of adversarial images")
    p.add_argument("--columns", type=int, default=10, help="grid columns")
    p.add_argument("--max-images", type=int, default=100, help="images in the grid")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as err:
        code, kind, msg = err.code, err.kind, str(err)
    except C.ConfigError as err:
        code, kind, msg = EXIT_CONFIG, "config", str(err)
    except FileNotFoundError as err:
        code, kind, msg = EXIT_MISSING, "missing_artifact", str(err)
    except NotCalibrated as err:
        code, kind, msg = EXIT_RUNTIME, "uncalibrated", str(err)
    except (ModelFileError, IDXError) as err:
        code, kind, msg = EXIT_RUNTIME, "bad_artifact", str(err)
    except TrainingDiverged as err:
        code, kind, msg = EXIT_RUNTIME, "diverged", str(err)
    except (ValueError, RuntimeError) as err:
        code, kind, msg = EXIT_RUNTIME, "runtime", str(err)
    msg = " ".join(msg.split())
    print(f"advbreak: error[{kind}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
