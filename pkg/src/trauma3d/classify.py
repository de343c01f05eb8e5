"""Multi-label classification: weighted BCE, augmentations, frozen-encoder probe, accuracy/AUC."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import tensor as T
from .detect import ContractError
from .mim import NumericError
from .networks import ClassificationHead, encoder_only, global_avg_pool
from .nn import param_hash
from .optim import AdamW, cosine_lr
from .tensor import Tensor
from .volume import ConfigurationError

LABEL_NAMES = ("bowel-healthy", "bowel-injury", "liver-healthy", "liver-high-grade",
               "kidney-high-grade", "spleen-healthy", "extravasation")


class DegenerateClassError(ValueError):
    pass


def pos_weights(labels, names=LABEL_NAMES):
    """w_i = N_neg / N_pos per column."""
    y = np.asarray(labels)
    if y.ndim != 2:
        raise ValueError(f"labels must be (N, C), got shape {y.shape}")
    pos = y.sum(axis=0).astype(np.float64)
    for i, n in enumerate(pos):
        if n == 0:
            name = names[i] if i < len(names) else str(i)
            raise DegenerateClassError(f"column {i} ({name}) has no positive samples")
    return (y.shape[0] - pos) / pos


def weighted_bce(logits, labels, weights=None):
    """Mean over batch and categories of -w y log s(z) - (1 - y) log(1 - s(z))."""
    z = T.as_tensor(logits)
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    w = np.ones(z.shape[-1], z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    # -log s(z) = softplus(-z), -log(1 - s(z)) = softplus(z)
    pos = T.softplus(-z) * Tensor(w * y)
    neg = T.softplus(z) * Tensor(1.0 - y)
    return T.mean(pos + neg)


# -- augmentation ---------------------------------------------------------
@dataclass(frozen=True)
class ClassAugSpec:
    gamma: tuple = (0.8, 1.2)
    scale: tuple = (0.85, 1.15)
    shift: float = 0.15
    noise_sigma: float = 0.05


IDENTITY_AUG = ClassAugSpec(gamma=(1.0, 1.0), scale=(1.0, 1.0), shift=0.0, noise_sigma=0.0)


def classify_augment(vol, seed, spec=ClassAugSpec()):
    """gamma -> scale -> shift -> noise -> clamp to [0, 1]."""
    rng = np.random.default_rng(seed)
    arr = np.asarray(vol)
    out = np.clip(arr.astype(np.float64), 0.0, None) ** rng.uniform(*spec.gamma)
    out = out * rng.uniform(*spec.scale)
    out = out + rng.uniform(-spec.shift, spec.shift)
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(arr.dtype)


# -- splits ---------------------------------------------------------------
def stratified_split(labels, fractions=(0.70, 0.15, 0.15), seed=0):
    """Index arrays per split; samples are grouped by label pattern and dealt proportionally."""
    y = np.asarray(labels)
    frac = np.asarray(fractions, dtype=np.float64)
    if np.any(frac < 0) or not math.isclose(frac.sum(), 1.0):
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    keys = ["".join(map(str, row)) for row in y.astype(int)]
    parts = [[] for _ in frac]
    carry = np.zeros(len(frac))
    for key in sorted(set(keys)):
        idx = np.array([i for i, k in enumerate(keys) if k == key])
        idx = idx[rng.permutation(len(idx))]
        # largest remainder with carry so small groups still fill every split over time
        want = frac * len(idx) + carry
        take = np.floor(want).astype(int)
        rest = len(idx) - take.sum()
        order = np.argsort(-(want - take), kind="stable")
        take[order[:rest]] += 1
        carry = want - take
        start = 0
        for s, n in enumerate(take):
            parts[s].extend(idx[start:start + n].tolist())
            start += n
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


# -- metrics --------------------------------------------------------------
def auc(scores, labels):
    """Rank-statistic AUC with midranks for ties; None when only one class is present."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def eval_classification(logits, labels, threshold=0.5, names=LABEL_NAMES):
    z = np.asarray(getattr(logits, "data", logits), dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if z.size == 0 or z.shape[0] == 0:
        raise ContractError("no samples to evaluate")
    if z.shape != y.shape:
        raise ContractError(f"logits {z.shape} and labels {y.shape} differ")
    prob = 1.0 / (1.0 + np.exp(-z))
    pred = (prob >= threshold).astype(int)
    acc = (pred == y).mean(axis=0)
    aucs = [auc(prob[:, i], y[:, i]) for i in range(y.shape[1])]
    defined = [a for a in aucs if a is not None]
    return {
        "names": list(names[:y.shape[1]]),
        "accuracy": [float(a) for a in acc],
        "auc": aucs,
        "mean_accuracy": float(acc.mean()),
        "mean_auc": float(np.mean(defined)) if defined else float("nan"),
        "n_auc_defined": len(defined),
        "n": int(y.shape[0]),
        "threshold": float(threshold),
    }


def report_table(metrics):
    """Per-category rows plus an overall row."""
    rows = [{"category": n, "accuracy": a, "auc": u}
            for n, a, u in zip(metrics["names"], metrics["accuracy"], metrics["auc"])]
    rows.append({"category": "overall", "accuracy": metrics["mean_accuracy"], "auc": metrics["mean_auc"]})
    return {"rows": rows, "n": metrics["n"], "threshold": metrics["threshold"],
            "auc_mean_over": metrics["n_auc_defined"]}


# -- probe ----------------------------------------------------------------
@dataclass
class ProbeConfig:
    lr: float = 3e-4
    weight_decay: float = 5e-4
    batch_size: int = 2
    epochs: int = 50
    dropout: float = 0.5
    hidden: int = 128
    frozen: bool = True
    use_pos_weights: bool = True
    augment: bool = True
    threshold: float = 0.5
    standardize: bool = True


@dataclass
class FeatureScaler:
    """Fixed per-channel standardization fit on training features (no parameters)."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats, eps=1e-6):
        f = np.asarray(getattr(feats, "data", feats), dtype=np.float64)
        return cls(f.mean(axis=0), f.std(axis=0) + eps)

    @classmethod
    def identity(cls, width):
        return cls(np.zeros(width), np.ones(width))

    def __call__(self, feats):
        f = T.as_tensor(feats)
        return (f - Tensor(self.mean.astype(f.dtype))) * Tensor((1.0 / self.std).astype(f.dtype))

    def state(self):
        return {"scaler/mean": self.mean, "scaler/std": self.std}

    @classmethod
    def from_state(cls, state):
        return cls(np.asarray(state["scaler/mean"], np.float64), np.asarray(state["scaler/std"], np.float64))


@dataclass
class ProbeRun:
    head: ClassificationHead
    rows: list
    best_epoch: int
    best_state: dict
    pos_weights: np.ndarray
    scaler: FeatureScaler


def features(encoder, volumes, frozen=True):
    """(N, C) global-average-pooled bottleneck features."""
    feats = [global_avg_pool(encoder_only(encoder, v, frozen)) for v in volumes]
    return T.stack(feats, axis=0) if not frozen else Tensor(np.stack([f.data for f in feats]))


def head_logits(head, feats, scaler=None):
    return head(scaler(feats) if scaler is not None else feats)


def _log_row(epoch, loss, metrics):
    row = {"epoch": epoch, "train_loss": loss, "val_mean_acc": metrics["mean_accuracy"],
           "val_mean_auc": metrics["mean_auc"]}
    for name, a in zip(metrics["names"], metrics["accuracy"]):
        row[f"acc_{name}"] = a
    for name, u in zip(metrics["names"], metrics["auc"]):
        row[f"auc_{name}"] = float("nan") if u is None else u
    return row


def log_fields(names=LABEL_NAMES):
    return (("epoch", "train_loss", "val_mean_acc", "val_mean_auc")
            + tuple(f"acc_{n}" for n in names) + tuple(f"auc_{n}" for n in names))


def train_probe(train_volumes, train_labels, val_volumes, val_labels, encoder, cfg=None, seed=0,
                head=None, on_epoch=None):
    """Fit the head on pooled encoder features; returns a ProbeRun.

    Row 0 evaluates before any update.  With ``cfg.frozen`` the encoder runs
    without a graph and only head parameters reach the optimizer.
    """
    cfg = cfg or ProbeConfig()
    if not train_volumes or not val_volumes:
        raise ConfigurationError("probe needs non-empty train and validation sets")
    width = encoder.cfg.bottleneck_channels
    y_train = np.asarray(train_labels).astype(int)
    y_val = np.asarray(val_labels).astype(int)
    head = head or ClassificationHead(width, cfg.hidden, y_train.shape[1], cfg.dropout, seed=seed)
    if head.n_in != width:
        raise ConfigurationError(f"head expects {head.n_in} features, encoder produces {width}")
    w = pos_weights(y_train) if cfg.use_pos_weights else None
    params = head.parameters() + ([] if cfg.frozen else encoder.parameters())
    opt = AdamW([{"params": params, "lr": cfg.lr}], weight_decay=cfg.weight_decay)
    enc_hash = param_hash(encoder.named_parameters())
    val_feats = features(encoder, val_volumes, frozen=True)
    plain_train = features(encoder, train_volumes, frozen=True)
    scaler = FeatureScaler.fit(plain_train) if cfg.standardize else FeatureScaler.identity(width)
    if not (cfg.frozen and not cfg.augment):
        plain_train = None

    def evaluate():
        head.eval()
        with T.no_grad():
            f = features(encoder, val_volumes, True) if not cfg.frozen else val_feats
            m = eval_classification(head(scaler(f)), y_val, cfg.threshold)
        head.train()
        return m

    first = evaluate()
    rows = [_log_row(0, float("nan"), first)]
    best = (first["mean_accuracy"], 0, head.state_dict())
    for epoch in range(1, cfg.epochs + 1):
        opt.set_lr(cosine_lr(cfg.lr, epoch - 1, cfg.epochs))
        order = np.random.default_rng([seed, 30, epoch]).permutation(len(train_volumes))
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            if plain_train is not None:
                x = Tensor(plain_train.data[idx])
            else:
                vols = [train_volumes[i] if not cfg.augment
                        else classify_augment(getattr(train_volumes[i], "voxels", train_volumes[i]),
                                              [seed, 31, epoch, int(i)])
                        for i in idx]
                x = features(encoder, vols, cfg.frozen)
            loss = weighted_bce(head(scaler(x)), y_train[idx], w)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite probe loss at epoch {epoch}", head.state_dict())
            opt.zero_grad()
            encoder.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        m = evaluate()
        row = _log_row(epoch, float(np.mean(losses)), m)
        rows.append(row)
        if m["mean_accuracy"] > best[0]:
            best = (m["mean_accuracy"], epoch, head.state_dict())
        if on_epoch is not None:
            on_epoch(row, head)
    if cfg.frozen and param_hash(encoder.named_parameters()) != enc_hash:
        raise ContractError("frozen encoder changed during probe training")
    return ProbeRun(head, rows, best[1], best[2], w, scaler)
