"""Patch-based masked image modeling for the U-Net."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .networks import MIMModel, UNetConfig
from .optim import Adam
from .tensor import DimensionError, Tensor

PSNR_CONVENTIONS = ("psnr_of_mean_mse", "mean_of_psnr")


class UndefinedLossError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Non-finite loss; ``state`` holds the last finite parameters when known."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class MaskSpec:
    patch_size: int = 16
    sub_patch: int = 4
    mask_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.patch_size % self.sub_patch:
            raise ValueError(f"patch_size {self.patch_size} not divisible by sub_patch {self.sub_patch}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1]")

    @property
    def n_subpatches(self):
        return (self.patch_size // self.sub_patch) ** 3

    @property
    def n_masked(self):
        return int(math.floor(self.mask_ratio * self.n_subpatches))


def patch_origin(dims, size, seed):
    dims = tuple(int(d) for d in dims)
    if any(d < size for d in dims):
        raise DimensionError(f"volume {dims} smaller than patch {size}")
    rng = np.random.default_rng(seed)
    return tuple(int(rng.integers(0, d - size + 1)) for d in dims)


def sample_patch(vol, size, seed):
    """Cube of edge ``size`` at a seeded uniform origin; returns (patch, origin)."""
    arr = np.asarray(getattr(vol, "voxels", vol))
    o = patch_origin(arr.shape, size, seed)
    return arr[o[0]:o[0] + size, o[1]:o[1] + size, o[2]:o[2] + size], o


def make_mask(spec, seed=None):
    """Boolean mask of whole sub-patches; exactly ``spec.n_masked`` of them are set."""
    g = spec.patch_size // spec.sub_patch
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    coarse = np.zeros(g ** 3, dtype=bool)
    coarse[rng.choice(g ** 3, size=spec.n_masked, replace=False)] = True
    coarse = coarse.reshape(g, g, g)
    s = spec.sub_patch
    return np.repeat(np.repeat(np.repeat(coarse, s, 0), s, 1), s, 2)


def mim_loss(reconstruction, original, mask):
    """Mean squared error over masked voxels only."""
    rec = T.as_tensor(reconstruction)
    target = np.asarray(original, dtype=rec.dtype).reshape(rec.shape)
    m = np.asarray(mask, dtype=bool).reshape(rec.shape)
    n = int(m.sum())
    if n == 0:
        raise UndefinedLossError("mask selects no voxels")
    diff = (rec - Tensor(target)) * Tensor(m.astype(rec.dtype))
    return T.tsum(diff * diff) * (1.0 / n)


def psnr(mse, peak=1.0):
    if not mse > 0:
        raise ValueError(f"PSNR undefined for mse={mse}")
    return float(10.0 * np.log10(peak ** 2 / mse))


def psnr_report(mses, peak=1.0):
    """Both averaging conventions for a set of per-patch (or per-volume) MSEs."""
    mses = np.asarray(mses, dtype=np.float64)
    return {
        "mean_mse": float(mses.mean()),
        "psnr_of_mean_mse": psnr(float(mses.mean()), peak),
        "mean_of_psnr": float(np.mean([psnr(m, peak) for m in mses])),
        "convention": "psnr_of_mean_mse",
    }


@dataclass
class PretrainConfig:
    epochs: int = 50
    patches_per_volume: int = 4
    lr: float = 1e-4
    eval_patches: int = 4
    resample_each_epoch: bool = True


def _eval_set(volumes, spec, n, seed):
    """Fixed held-out (patch, mask) pairs."""
    out = []
    for j in range(n):
        vol = volumes[j % len(volumes)]
        patch, _ = sample_patch(vol, spec.patch_size, seed=[seed, 1, j])
        out.append((patch, make_mask(spec, seed=[seed, 2, j])))
    return out


def evaluate(model, pairs):
    with T.no_grad():
        mses = []
        for patch, mask in pairs:
            _, rec = model(patch, mask)
            mses.append(float(mim_loss(rec, patch, mask).item()))
    return mses


def pretrain(volumes, unet_cfg=None, spec=None, cfg=None, seed=0, eval_volumes=None, model=None):
    """Train a MIMModel; returns (model, log rows).

    Row 0 is the evaluation before any update.  ``eval_volumes`` default to
    the training volumes.
    """
    if not volumes:
        raise ValueError("no training volumes")
    spec = spec or MaskSpec()
    cfg = cfg or PretrainConfig()
    unet_cfg = unet_cfg or UNetConfig()
    model = model or MIMModel(unet_cfg, seed=seed)
    opt = Adam([{"params": model.parameters(), "lr": cfg.lr}])
    pairs = _eval_set(eval_volumes or volumes, spec, cfg.eval_patches, seed)
    order_rng = np.random.default_rng([seed, 3])

    def row(epoch, mean_loss):
        mses = evaluate(model, pairs)
        rep = psnr_report(mses)
        return {"epoch": epoch, "mean_loss": mean_loss, "eval_mse": rep["mean_mse"],
                "eval_psnr": rep["psnr_of_mean_mse"]}

    rows = [row(0, float("nan"))]
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        key = epoch if cfg.resample_each_epoch else 0
        for v in order_rng.permutation(len(volumes)):
            for j in range(cfg.patches_per_volume):
                patch, _ = sample_patch(volumes[v], spec.patch_size, seed=[seed, 4, key, int(v), j])
                mask = make_mask(spec, seed=[seed, 5, key, int(v), j])
                _, rec = model(patch, mask)
                loss = mim_loss(rec, patch, mask)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite MIM loss at epoch {epoch}")
                model.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
        rows.append(row(epoch, float(np.mean(losses))))
    return model, rows


LOG_FIELDS = ("epoch", "mean_loss", "eval_mse", "eval_psnr")


def format_rows(rows, fields):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)
