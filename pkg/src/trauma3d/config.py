"""Run configuration: one JSON tree of module configs with strict keys and dotted overrides."""
from __future__ import annotations

import copy
import dataclasses
import json

from .classify import ClassAugSpec, ProbeConfig
from .detect import STRONG, WEAK, AugSpec, DetectorConfig, TrainingSchedule
from .mim import MaskSpec, PretrainConfig
from .networks import UNetConfig
from .phantom import PhantomSpec
from .rpe import RPEConfig
from .volume import HU_WINDOW, ConfigurationError

PRECISIONS = ("float32", "float64")


class ConfigError(ConfigurationError):
    """Configuration problem tied to a dotted key path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _plain(obj):
    """Dataclass instance -> JSON-ready dict (tuples become lists)."""
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _plain(v)
        elif isinstance(v, tuple):
            v = [list(x) if isinstance(x, tuple) else x for x in v]
        out[f.name] = v
    return out


def default_config():
    phantom = _plain(PhantomSpec(dims=(32, 32, 32), semi_axes_range=(3, 6)))
    phantom.pop("seed")
    phantom.update(n_labeled=4, n_unlabeled=8, n_val=2, n_test=2, compress=False)
    det = _plain(DetectorConfig())
    det.pop("unet")
    det.pop("rpe")
    return {
        "seed": 0,
        "output_dir": "runs",
        "run_name": None,
        "precision": "float32",
        "data": {"dataset": None, "input": None, "encoder_checkpoint": None},
        "phantom": phantom,
        "preprocess": {"target_spacing": [2.0, 1.0, 1.0], "target_dims": [32, 32, 32],
                       "window": list(HU_WINDOW), "connectivity": 26, "min_voxels": 8, "roi_crop": False},
        "unet": _plain(UNetConfig()),
        "rpe": _plain(RPEConfig()),
        "mask": {k: v for k, v in _plain(MaskSpec()).items() if k != "seed"},
        "pretrain": _plain(PretrainConfig()),
        "detector": det,
        "schedule": _plain(TrainingSchedule()),
        "augment": {"weak": _plain(WEAK), "strong": _plain(STRONG), "unlabeled_batch": 2, "temperature": 2.0},
        "probe": _plain(ProbeConfig()),
        "class_augment": _plain(ClassAugSpec()),
    }


def _check_type(path, default, value):
    if default is None or value is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(default, bool) and isinstance(value, float):
            ok = value.is_integer()
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(path, f"expected {type(default).__name__}, got {type(value).__name__} {value!r}")


def merge(base, update, path=""):
    """Recursive merge that rejects keys absent from ``base``."""
    if not isinstance(update, dict):
        raise ConfigError(path, "expected an object")
    out = copy.deepcopy(base)
    for key, value in update.items():
        sub = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(sub, "unknown key")
        if isinstance(base[key], dict):
            out[key] = merge(base[key], value, sub)
        else:
            _check_type(sub, base[key], value)
            out[key] = value
    return out


def parse_override(text):
    """``a.b.c=value`` -> nested dict; value parsed as JSON, else kept as a string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(key, "empty path segment")
    node = value
    for p in reversed(parts):
        node = {p: node}
    return node


def resolve(user=None, overrides=(), env=None):
    """Defaults <- user JSON <- dotted overrides <- env output dir."""
    cfg = default_config()
    if user:
        cfg = merge(cfg, user)
    for text in overrides:
        cfg = merge(cfg, parse_override(text))
    env = env or {}
    if env.get("TRAUMA3D_OUTPUT_DIR"):
        cfg["output_dir"] = env["TRAUMA3D_OUTPUT_DIR"]
    if cfg["precision"] not in PRECISIONS:
        raise ConfigError("precision", f"must be one of {PRECISIONS}")
    build(cfg)  # surface construction errors early
    return cfg


def load(path, overrides=(), env=None):
    user = None
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    return resolve(user, overrides, env)


def _tuples(d):
    return {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
            for k, v in d.items()}


def _make(cls, section, path):
    try:
        return cls(**_tuples(section))
    except ConfigurationError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(path, str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


@dataclasses.dataclass
class Built:
    phantom: PhantomSpec
    counts: dict
    unet: UNetConfig
    rpe: RPEConfig
    mask: MaskSpec
    pretrain: PretrainConfig
    detector: DetectorConfig
    schedule: TrainingSchedule
    weak: AugSpec
    strong: AugSpec
    probe: ProbeConfig
    class_augment: ClassAugSpec


def build(cfg):
    """Instantiate every module config from a resolved tree."""
    ph = dict(cfg["phantom"])
    counts = {k: ph.pop(k) for k in ("n_labeled", "n_unlabeled", "n_val", "n_test")}
    counts["compress"] = ph.pop("compress")
    unet = _make(UNetConfig, cfg["unet"], "unet")
    rpe = _make(RPEConfig, cfg["rpe"], "rpe")
    det = dict(cfg["detector"], unet=unet, rpe=rpe)
    try:
        detector = DetectorConfig(**det)
    except ConfigurationError as exc:
        raise ConfigError("detector", str(exc)) from exc
    aug = cfg["augment"]
    return Built(
        phantom=_make(PhantomSpec, dict(ph, seed=cfg["seed"]), "phantom"),
        counts=counts,
        unet=unet,
        rpe=rpe,
        mask=_make(MaskSpec, dict(cfg["mask"], seed=cfg["seed"]), "mask"),
        pretrain=_make(PretrainConfig, cfg["pretrain"], "pretrain"),
        detector=detector,
        schedule=_make(TrainingSchedule, cfg["schedule"], "schedule"),
        weak=_make(AugSpec, aug["weak"], "augment.weak"),
        strong=_make(AugSpec, aug["strong"], "augment.strong"),
        probe=_make(ProbeConfig, cfg["probe"], "probe"),
        class_augment=_make(ClassAugSpec, cfg["class_augment"], "class_augment"),
    )


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
