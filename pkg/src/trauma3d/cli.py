"""Command-line entry: phantom, preprocess, pretrain, train-detect, train-classify, eval, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import config as C
from . import tensor as T
from .checkpoint import CheckpointError
from .classify import (LABEL_NAMES, DegenerateClassError, FeatureScaler, eval_classification, features,
                       log_fields as probe_fields, report_table, train_probe)
from .detect import LOG_FIELDS as DETECT_FIELDS
from .detect import Detector, Sample, evaluate_detections, predict, train_detection
from .geometry import MAP_THRESHOLDS, UndefinedMetricError, report_json
from .mim import LOG_FIELDS as MIM_FIELDS
from .mim import MIMModel, NumericError, format_rows, pretrain
from .networks import ClassificationHead, Encoder, encoder_state
from .phantom import PlacementError, load_manifest, make_dataset
from .volume import ConfigurationError, EmptyMaskWarning, load_rvol, preprocess_labeled, preprocess_unlabeled, save_rvol

log = logging.getLogger("trauma3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# -- run directory helpers ----------------------------------------------
def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class RunDir:
    """Output directory holding resolved config, run manifest, logs and checkpoints."""

    def __init__(self, cfg, command, args):
        name = cfg["run_name"] or command
        self.path = os.path.join(cfg["output_dir"], name)
        os.makedirs(self.path, exist_ok=True)
        self.cfg = cfg
        self.command = command
        self.args = args
        self.inputs = {}
        self.outputs = []
        self.status = "running"
        self.write_text("config.json", C.dumps(cfg))

    def file(self, name):
        return os.path.join(self.path, name)

    def write_text(self, name, text):
        with open(self.file(name), "w", newline="") as fh:
            fh.write(text)
        if name not in self.outputs and name != "run.json":
            self.outputs.append(name)

    def write_json(self, name, obj):
        self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")

    def save_checkpoint(self, name, tensors):
        ckpt.save(self.file(name), tensors)
        if name not in self.outputs:
            self.outputs.append(name)

    def add_input(self, path):
        if path and os.path.isfile(path):
            # relative keys keep run.json identical across checkouts
            self.inputs[os.path.relpath(path)] = _sha256(path)

    def finish(self, status="ok", error=None):
        self.status = status
        files = {n: _sha256(self.file(n)) for n in sorted(self.outputs) if os.path.isfile(self.file(n))}
        manifest = {"command": self.command, "version": __version__, "seed": self.cfg["seed"],
                    "precision": self.cfg["precision"], "args": self.args, "inputs": self.inputs,
                    "outputs": files, "status": status}
        if error:
            manifest["error"] = error
        with open(self.file("run.json"), "w") as fh:
            fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dataset(cfg, run):
    path = cfg["data"]["dataset"]
    if not path:
        raise C.ConfigError("data.dataset", "a dataset directory is required for this command")
    try:
        manifest, base = load_manifest(path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset manifest not found under {path}") from exc
    run.add_input(os.path.join(base, "manifest.json"))
    return manifest, base


def _load(base, rel):
    path = os.path.join(base, rel)
    if not os.path.isfile(path):
        raise DataError(f"missing volume {path}")
    return load_rvol(path)


def _volumes(manifest, base, role):
    return [_load(base, rel)[0].voxels for rel in manifest.get(role, [])]


def _samples(manifest, base, role, cfg):
    out = []
    pp = cfg["preprocess"]
    for rel in manifest.get(role, []):
        vol, mask, _ = _load(base, rel)
        if mask is None:
            raise DataError(f"{rel} has no label mask")
        out.append(Sample.from_mask(vol.voxels, mask, pp["connectivity"], pp["min_voxels"]))
    return out


def _labels(manifest, role):
    rows = [manifest["labels"].get(rel) for rel in manifest.get(role, [])]
    if any(r is None for r in rows):
        raise DataError(f"{role} split has volumes without labels")
    return np.array(rows, dtype=np.int64).reshape(-1, len(LABEL_NAMES))


def _encoder_weights(cfg, run):
    path = cfg["data"]["encoder_checkpoint"]
    if not path:
        return None
    run.add_input(path)
    try:
        state = ckpt.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"encoder checkpoint {path} not found") from exc
    return encoder_state(state)


def _load_encoder(encoder, state):
    try:
        encoder.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"encoder checkpoint does not match unet config: {exc}") from exc


def _csv(rows, fields):
    return format_rows(rows, fields)


# -- commands -------------------------------------------------------------
def cmd_phantom(cfg, built, run, args):
    c = built.counts
    manifest = make_dataset(c["n_labeled"], c["n_unlabeled"], c["n_val"], c["n_test"], built.phantom,
                            cfg["seed"], run.path, compress=c["compress"])
    for role in ("labeled", "unlabeled", "val", "test"):
        run.outputs.extend(manifest.get(role, []))
    run.outputs.append("manifest.json")
    log.info("wrote %d volumes to %s", len(manifest["hashes"]), run.path)


def cmd_preprocess(cfg, built, run, args):
    src = args.input or cfg["data"]["input"]
    if not src:
        raise C.ConfigError("data.input", "an input directory is required")
    if not os.path.isdir(src):
        raise DataError(f"input directory {src} not found")
    pp = cfg["preprocess"]
    spacing, dims = tuple(pp["target_spacing"]), tuple(pp["target_dims"])
    names = sorted(n for n in os.listdir(src) if n.endswith((".rvol", ".rvol.gz")))
    src_manifest = None
    if os.path.isfile(os.path.join(src, "manifest.json")):
        src_manifest, _ = load_manifest(src)
        run.add_input(os.path.join(src, "manifest.json"))
    hashes = {}
    for name in names:
        path = os.path.join(src, name)
        run.add_input(path)
        vol, mask, _ = load_rvol(path)
        if mask is None:
            out = preprocess_unlabeled(vol, spacing, dims, tuple(pp["window"]))
            save_rvol(run.file(name), out)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EmptyMaskWarning)
                out, seg, boxes = preprocess_labeled(vol, mask, spacing, dims, tuple(pp["window"]),
                                                     pp["connectivity"], pp["min_voxels"], pp["roi_crop"])
            save_rvol(run.file(name), out, seg, [b for b, _ in boxes])
        hashes[name] = _sha256(run.file(name))
        run.outputs.append(name)
    if src_manifest is not None:
        src_manifest["hashes"] = hashes
        run.write_json("manifest.json", src_manifest)
    log.info("preprocessed %d volumes", len(names))


def cmd_pretrain(cfg, built, run, args):
    manifest, base = _dataset(cfg, run)
    train = _volumes(manifest, base, "labeled") + _volumes(manifest, base, "unlabeled")
    evals = _volumes(manifest, base, "val") or None
    if not train:
        raise DataError("no training volumes in dataset")
    model = MIMModel(built.unet, seed=cfg["seed"])
    try:
        model, rows = pretrain(train, built.unet, built.mask, built.pretrain, cfg["seed"], evals, model)
    except NumericError:
        run.save_checkpoint("last_good.vxt", model.state_dict())
        raise
    run.write_text("pretrain_log.csv", _csv(rows, MIM_FIELDS))
    run.save_checkpoint("mim.vxt", model.state_dict())
    run.save_checkpoint("encoder.vxt", {f"encoder/{k}": v for k, v in model.unet.encoder.state_dict().items()})
    log.info("eval mse %.5g -> %.5g", rows[0]["eval_mse"], rows[-1]["eval_mse"])


def cmd_train_detect(cfg, built, run, args):
    manifest, base = _dataset(cfg, run)
    labeled = _samples(manifest, base, "labeled", cfg)
    if not labeled:
        raise DataError("no labeled volumes in dataset")
    unlabeled = _volumes(manifest, base, "unlabeled")
    val = _samples(manifest, base, "val", cfg)
    enc = _encoder_weights(cfg, run)
    if enc is not None:
        _load_encoder(Encoder(built.unet, np.random.default_rng(0)), enc)
    aug = cfg["augment"]
    last = {}

    def keep(row, model):
        last["state"] = model.state_dict()

    try:
        res = train_detection(labeled, unlabeled, val, built.detector, built.schedule, built.weak, built.strong,
                              cfg["seed"], enc, aug["unlabeled_batch"], aug["temperature"], on_epoch=keep)
    except NumericError as exc:
        run.save_checkpoint("last_good.vxt", exc.state or last.get("state", {}))
        raise
    run.write_text("detect_log.csv", _csv(res.rows, DETECT_FIELDS))
    run.save_checkpoint("best.vxt", res.best_state)
    run.save_checkpoint("last.vxt", res.last_state)
    run.save_checkpoint("teacher.vxt", res.teacher.state_dict())
    run.write_json("summary.json", {"best_epoch": res.best_epoch, "final": res.rows[-1]})


def cmd_train_classify(cfg, built, run, args):
    manifest, base = _dataset(cfg, run)
    train_v, val_v = _volumes(manifest, base, "labeled"), _volumes(manifest, base, "val")
    if not train_v or not val_v:
        raise DataError("classification needs labeled and val volumes")
    y_train, y_val = _labels(manifest, "labeled"), _labels(manifest, "val")
    encoder = Encoder(built.unet, np.random.default_rng(cfg["seed"]))
    enc = _encoder_weights(cfg, run)
    if enc is not None:
        _load_encoder(encoder, enc)
    res = train_probe(train_v, y_train, val_v, y_val, encoder, built.probe, cfg["seed"])
    run.write_text("probe_log.csv", _csv(res.rows, probe_fields()))
    state = {f"encoder/{k}": v for k, v in encoder.state_dict().items()}
    state.update({f"head/{k}": v for k, v in res.best_state.items()})
    state.update(res.scaler.state())
    run.save_checkpoint("probe.vxt", state)
    run.write_json("summary.json", {"best_epoch": res.best_epoch, "final": res.rows[-1],
                                    "pos_weights": None if res.pos_weights is None else res.pos_weights.tolist()})


def _run_config(checkpoint_path):
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), "config.json")
    if not os.path.isfile(path):
        raise DataError(f"no config.json beside checkpoint {checkpoint_path}")
    with open(path) as fh:
        return C.resolve(json.load(fh))


def _log_curve(checkpoint_path, name):
    path = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), name)
    if not os.path.isfile(path):
        return None
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def detection_report(detections, ground_truths, thresholds=MAP_THRESHOLDS):
    try:
        return report_json(evaluate_detections(detections, ground_truths, thresholds))
    except UndefinedMetricError as exc:
        raise DataError(str(exc)) from exc


def cmd_eval(cfg, built, run, args):
    if not args.checkpoint:
        raise C.ConfigError("checkpoint", "--checkpoint is required")
    try:
        state = ckpt.load(args.checkpoint)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {args.checkpoint} not found") from exc
    run.add_input(args.checkpoint)
    train_cfg = _run_config(args.checkpoint)
    tb = C.build(train_cfg)
    manifest, base = _dataset(cfg, run)
    split = args.split
    if any(k.startswith("vdetr/") for k in state):
        model = Detector(tb.detector, seed=train_cfg["seed"])
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"checkpoint does not match its config: {exc}") from exc
        samples = _samples(manifest, base, split, train_cfg)
        if not samples:
            raise DataError(f"split {split!r} is empty")
        dets = predict(model, samples)
        report = {"task": "detection", "split": split, **detection_report(dets, [s.ground_truth() for s in samples])}
        curve = _log_curve(args.checkpoint, "detect_log.csv")
        fields = ("epoch",) + tuple(f"val_mAP@{t:.2f}" for t in MAP_THRESHOLDS)
    elif any(k.startswith("head/") for k in state):
        encoder = Encoder(tb.unet, np.random.default_rng(0))
        _load_encoder(encoder, encoder_state(state, "encoder/"))
        head_state = {k[len("head/"):]: v for k, v in state.items() if k.startswith("head/")}
        head = ClassificationHead(tb.unet.bottleneck_channels, tb.probe.hidden, len(LABEL_NAMES), tb.probe.dropout)
        try:
            head.load_state_dict(head_state)
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"head checkpoint does not match its config: {exc}") from exc
        head.eval()
        scaler = FeatureScaler.from_state(state)
        vols, y = _volumes(manifest, base, split), _labels(manifest, split)
        if not vols:
            raise DataError(f"split {split!r} is empty")
        with T.no_grad():
            logits = head(scaler(features(encoder, vols, True))).data
        metrics = eval_classification(logits, y, tb.probe.threshold)
        report = {"task": "classification", "split": split, **report_table(metrics)}
        curve = _log_curve(args.checkpoint, "probe_log.csv")
        fields = ("epoch", "val_mean_acc", "val_mean_auc")
    else:
        raise ConfigurationError("checkpoint holds neither a detector nor a probe head")
    run.write_json(f"eval_{split}.json", report)
    if curve is not None:
        rows = [{k: r[k] for k in fields} for r in curve]
        run.write_text(f"curve_{split}.csv", _plain_csv(rows, fields))


def _plain_csv(rows, fields):
    lines = [",".join(fields)] + [",".join(str(r[f]) for f in fields) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_report(cfg, built, run, args):
    """Collect summaries and eval reports from run directories into one JSON plus a long-form CSV."""
    dirs = args.runs or []
    if not dirs:
        raise C.ConfigError("runs", "at least one run directory is required")
    summary = {}
    long_rows = []
    for d in dirs:
        if not os.path.isdir(d):
            raise DataError(f"run directory {d} not found")
        name = os.path.basename(os.path.normpath(d))
        entry = {}
        for fn in sorted(os.listdir(d)):
            p = os.path.join(d, fn)
            if fn in ("summary.json", "run.json") or (fn.startswith("eval_") and fn.endswith(".json")):
                run.add_input(p)
                with open(p) as fh:
                    entry[fn] = json.load(fh)
            elif fn.endswith("_log.csv"):
                run.add_input(p)
                with open(p, newline="") as fh:
                    for r in csv.DictReader(fh):
                        for k, v in r.items():
                            if k not in ("epoch", "phase"):
                                long_rows.append({"run": name, "log": fn, "epoch": r["epoch"], "metric": k,
                                                  "value": v})
        summary[name] = entry
    run.write_json("report.json", summary)
    run.write_text("metrics_long.csv", _plain_csv(long_rows, ("run", "log", "epoch", "metric", "value")))


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train-detect": cmd_train_detect,
    "train-classify": cmd_train_classify,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    p = argparse.ArgumentParser(prog="trauma3d", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                        help="override one config leaf (value parsed as JSON)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "preprocess":
            sp.add_argument("--input", help="directory of RVOL files")
        if name == "eval":
            sp.add_argument("--checkpoint", help="detector or probe checkpoint (.vxt)")
            sp.add_argument("--split", default="test", choices=("labeled", "val", "test"))
        if name == "report":
            sp.add_argument("runs", nargs="*", help="run directories")
    return p


def _err_text(exc):
    return f"{type(exc).__name__}: {exc}"


def main(argv=None, env=None):
    env = dict(os.environ if env is None else env)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = C.load(args.config, args.overrides, env)
        built = C.build(cfg)
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    arg_record = {k: v for k, v in vars(args).items() if k not in ("verbose", "config")}
    run = RunDir(cfg, args.command, arg_record)
    try:
        with T.precision(cfg["precision"]):
            COMMANDS[args.command](cfg, built, run, args)
    except ConfigurationError as exc:
        run.finish("config_error", _err_text(exc))
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        run.finish("numeric_error", _err_text(exc))
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, PlacementError, DegenerateClassError, UndefinedMetricError, OSError,
            ValueError) as exc:
        run.finish("data_error", _err_text(exc))
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    run.finish("ok")
    print(run.path)
    return EXIT_OK
