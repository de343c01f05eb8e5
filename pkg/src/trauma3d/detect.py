"""Two-phase semi-supervised detector training with an EMA teacher."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import tensor as T
from .geometry import BBox3D, MAP_THRESHOLDS, UndefinedMetricError, evaluate_detections, hungarian_match, iou_matrix
from .mim import NumericError
from .networks import Encoder, UNetConfig, encoder_only, sample_tokens
from .nn import Module
from .optim import AdamW, clip_grad_norm, cosine_lr
from .rpe import RPEConfig, RPEDecoder
from .tensor import Tensor
from .volume import ConfigurationError, labeled_boxes


class ContractError(ValueError):
    pass


@dataclass
class TrainingSchedule:
    total_epochs: int = 100
    phase_boundary: int = 20
    encoder_warmup_epochs: int = 3
    lr_decoder: float = 1e-4
    lr_encoder: float = 1e-5
    lambda_start: int = 20
    lambda_end: int = 60
    lambda_max: float = 0.3
    ema_decay: float = 0.999
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    decoder_lr_decay: str = "none"

    def __post_init__(self):
        if not 0 <= self.phase_boundary <= self.lambda_start <= self.lambda_end <= self.total_epochs:
            raise ConfigurationError(
                f"need 0 <= phase_boundary <= lambda_start <= lambda_end <= total_epochs, got "
                f"{self.phase_boundary}, {self.lambda_start}, {self.lambda_end}, {self.total_epochs}")

    def scaled(self, total_epochs):
        """Same schedule with every epoch boundary scaled to ``total_epochs``."""
        f = total_epochs / self.total_epochs
        return replace(self, total_epochs=total_epochs, phase_boundary=round(self.phase_boundary * f),
                       encoder_warmup_epochs=round(self.encoder_warmup_epochs * f),
                       lambda_start=round(self.lambda_start * f), lambda_end=round(self.lambda_end * f))

    def decoder_lr(self, epoch):
        if self.decoder_lr_decay == "cosine":
            return cosine_lr(self.lr_decoder, epoch, self.total_epochs)
        return float(self.lr_decoder)

    def phase(self, epoch):
        return "I" if epoch < self.phase_boundary else "II"


def lambda_schedule(epoch, sched):
    if epoch <= sched.lambda_start:
        return 0.0
    if epoch >= sched.lambda_end:
        return float(sched.lambda_max)
    return float(sched.lambda_max * (epoch - sched.lambda_start) / (sched.lambda_end - sched.lambda_start))


def encoder_lr(epoch, sched):
    if epoch < sched.phase_boundary:
        return 0.0
    if sched.encoder_warmup_epochs <= 0:
        return float(sched.lr_encoder)
    return float(sched.lr_encoder * min(1.0, (epoch - sched.phase_boundary) / sched.encoder_warmup_epochs))


# -- augmentation ---------------------------------------------------------
@dataclass(frozen=True)
class AugSpec:
    noise_sigma: float = 0.0
    shift: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    blur_sigma: float = 0.0
    elastic_amplitude: float = 0.0
    elastic_spacing: int = 8


WEAK = AugSpec(noise_sigma=0.01, shift=0.02)
STRONG = AugSpec(noise_sigma=0.05, shift=0.10, blur_sigma=1.0, elastic_amplitude=2.0, elastic_spacing=8)


def elastic_warp(vol, amplitude, spacing, rng):
    """Random displacement on a control grid every ``spacing`` voxels, trilinear everywhere."""
    dims = vol.shape
    grid = [int(np.ceil((n - 1) / spacing)) + 1 for n in dims]
    disp = rng.uniform(-amplitude, amplitude, (3,) + tuple(grid))
    base = np.indices(dims, dtype=np.float64)
    fine = base / spacing
    coords = np.stack([ndimage.map_coordinates(disp[a], fine, order=1, mode="nearest") for a in range(3)])
    return ndimage.map_coordinates(vol, base + coords, order=1, mode="nearest")


def apply_augmentation(vol, spec, seed):
    """elastic -> blur -> scale -> shift -> noise -> clamp to [0, 1]."""
    rng = np.random.default_rng(seed)
    arr = np.asarray(vol)
    out = arr.astype(np.float64)
    if spec.elastic_amplitude > 0:
        out = elastic_warp(out, spec.elastic_amplitude, spec.elastic_spacing, rng)
    if spec.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, spec.blur_sigma, mode="nearest")
    lo, hi = spec.scale_range
    if (lo, hi) != (1.0, 1.0):
        out = out * rng.uniform(lo, hi)
    if spec.shift > 0:
        out = out + rng.uniform(-spec.shift, spec.shift)
    if spec.noise_sigma > 0:
        out = out + rng.normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(arr.dtype)


# -- model ----------------------------------------------------------------
@dataclass
class DetectorConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    rpe: RPEConfig = field(default_factory=RPEConfig)
    n_tokens: int = 4096
    w_cls: float = 1.0
    w_l1: float = 2.0
    w_iou: float = 2.0
    aux_loss: bool = True
    no_object_weight: float = 0.1

    def __post_init__(self):
        if self.rpe.feature_dim != self.unet.bottleneck_channels:
            raise ConfigurationError(
                f"rpe.feature_dim {self.rpe.feature_dim} != unet.bottleneck_channels {self.unet.bottleneck_channels}")


class Detector(Module):
    """U-Net encoder + token sampler + vertex-RPE decoder."""

    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        self.encoder = Encoder(cfg.unet, np.random.default_rng(seed))
        self.vdetr = RPEDecoder(cfg.rpe, seed=seed + 1)

    def tokens(self, vol, frozen=False, token_seed=0, grid=None):
        grid = grid if grid is not None else encoder_only(self.encoder, vol, frozen)
        return sample_tokens(grid, self.cfg.n_tokens, token_seed)

    def forward(self, vol, frozen=False, token_seed=0, grid=None):
        return self.vdetr(self.tokens(vol, frozen, token_seed, grid))

    def clone(self):
        twin = Detector(self.cfg)
        twin.load_state_dict(self.state_dict())
        return twin


@dataclass
class Sample:
    """A training/evaluation volume with model-frame targets."""
    volume: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray
    categories: np.ndarray

    @classmethod
    def from_boxes(cls, volume, boxes):
        """``boxes``: [(inclusive corners, category)] in voxel indices."""
        dims = np.asarray(volume).shape
        model = [BBox3D.from_inclusive(b).to_model(dims) for b, _ in boxes]
        c = np.array([m.center for m in model]).reshape(-1, 3)
        s = np.array([m.size for m in model]).reshape(-1, 3)
        return cls(np.asarray(volume), c, s, np.array([int(k) for _, k in boxes], dtype=np.int64))

    @classmethod
    def from_mask(cls, volume, mask, connectivity=26, min_voxels=0):
        return cls.from_boxes(volume, labeled_boxes(mask, connectivity, min_voxels))

    def ground_truth(self):
        """[(voxel-frame BBox3D, category)] for mAP."""
        dims = np.asarray(self.volume.shape, float)
        return [(BBox3D(c * dims, s * dims), int(k)) for c, s, k in zip(self.centers, self.sizes, self.categories)]


# -- losses ---------------------------------------------------------------
def box_iou_pairs(pc, ps, gc, gs):
    """Differentiable IoU between rows of (pc, ps) tensors and constant (gc, gs)."""
    lo = pc - ps * 0.5
    hi = pc + ps * 0.5
    ext = T.relu(T.minimum(hi, Tensor(gc + gs * 0.5)) - T.maximum(lo, Tensor(gc - gs * 0.5)))
    inter = T.index(ext, (slice(None), 0)) * T.index(ext, (slice(None), 1)) * T.index(ext, (slice(None), 2))
    vol_p = T.index(ps, (slice(None), 0)) * T.index(ps, (slice(None), 1)) * T.index(ps, (slice(None), 2))
    union = vol_p + Tensor(gs.prod(axis=1)) - inter
    return inter / union


def matching_cost(out, gt_c, gt_s, gt_k, w_cls=1.0, w_l1=2.0, w_iou=2.0):
    p = out.probabilities()
    c, s = out.centers.data.astype(np.float64), out.sizes.data.astype(np.float64)
    l1 = np.abs(c[:, None] - gt_c[None]).sum(-1) + np.abs(s[:, None] - gt_s[None]).sum(-1)
    return w_cls * (1.0 - p[:, gt_k]) + w_l1 * l1 + w_iou * (1.0 - iou_matrix(c, s, gt_c, gt_s))


def layer_loss(out, gt_c, gt_s, gt_k, cfg):
    """Set-prediction loss for one layer; returns (loss, matched (rows, cols))."""
    K, n_cls = out.logits.shape
    gt_c = np.asarray(gt_c, np.float64).reshape(-1, 3)
    gt_s = np.asarray(gt_s, np.float64).reshape(-1, 3)
    gt_k = np.asarray(gt_k, np.int64).reshape(-1)
    targets = np.full(K, n_cls - 1, dtype=np.int64)
    rows = cols = np.zeros(0, np.int64)
    if len(gt_k):
        rows, cols = hungarian_match(matching_cost(out, gt_c, gt_s, gt_k, cfg.w_cls, cfg.w_l1, cfg.w_iou))
        targets[rows] = gt_k[cols]
    weights = None
    if cfg.no_object_weight != 1.0:
        weights = np.where(targets == n_cls - 1, cfg.no_object_weight, 1.0)
    loss = T.cross_entropy(out.logits, targets, weights)
    if len(rows):
        m = float(len(rows))
        pc, ps = T.index(out.centers, rows), T.index(out.sizes, rows)
        l1 = (T.tsum(T.absolute(pc - Tensor(gt_c[cols]))) + T.tsum(T.absolute(ps - Tensor(gt_s[cols])))) * (1.0 / m)
        iou = box_iou_pairs(pc, ps, gt_c[cols], gt_s[cols])
        loss = loss + l1 * cfg.w_l1 + (1.0 - T.mean(iou)) * cfg.w_iou
    return loss, (rows, cols)


def supervised_detection_loss(outputs, gt_centers, gt_sizes, gt_categories, cfg=None):
    """Sum of per-layer set-prediction losses (final layer only when ``aux_loss`` is off)."""
    cfg = cfg or DetectorConfig()
    layers = outputs if cfg.aux_loss else outputs[-1:]
    total = None
    for out in layers:
        loss, _ = layer_loss(out, gt_centers, gt_sizes, gt_categories, cfg)
        total = loss if total is None else total + loss
    return total


def consistency_losses(student, teacher, temperature=2.0):
    """(L_center, L_size, L_cls); teacher values are constants."""
    if student.logits.shape != teacher.logits.shape:
        raise ContractError(f"query count mismatch: {student.logits.shape} vs {teacher.logits.shape}")
    tc = Tensor(teacher.centers.data)
    ts = Tensor(teacher.sizes.data)
    l_center = T.mean((student.centers - tc) ** 2)
    l_size = T.mean((student.sizes - ts) ** 2)
    zt = teacher.logits.data.astype(np.float64) / temperature
    zt = zt - zt.max(axis=1, keepdims=True)
    log_pt = zt - np.log(np.exp(zt).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(student.logits * (1.0 / temperature), axis=-1)
    kl = T.tsum(Tensor(pt.astype(log_ps.dtype)) * (Tensor(log_pt.astype(log_ps.dtype)) - log_ps), axis=1)
    l_cls = T.mean(kl) * temperature ** 2
    return l_center, l_size, l_cls


def ema_update(teacher, student, decay):
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if set(t_params) != set(s_params):
        raise ContractError("teacher/student parameter names differ: "
                            f"{sorted(set(t_params) ^ set(s_params))[:5]}")
    for name, tp in t_params.items():
        tp.data = (decay * tp.data + (1.0 - decay) * s_params[name].data).astype(tp.dtype)
    return teacher


# -- evaluation -----------------------------------------------------------
def predict(model, samples, seed=0):
    """Final-layer detections (voxel frame) per sample, inference mode."""
    model.eval()
    dets = []
    with T.no_grad():
        for i, s in enumerate(samples):
            outs = model(s.volume, frozen=True, token_seed=[seed, 20, i])
            dets.append(outs[-1].detections(dims=s.volume.shape))
    model.train()
    return dets


def evaluate_map(model, samples, seed=0, thresholds=MAP_THRESHOLDS):
    """Threshold -> mAP; NaN when the samples carry no ground truth."""
    if not samples:
        return {float(t): float("nan") for t in thresholds}
    try:
        rep = evaluate_detections(predict(model, samples, seed), [s.ground_truth() for s in samples], thresholds)
    except UndefinedMetricError:
        return {float(t): float("nan") for t in thresholds}
    return rep["map"]


LOG_FIELDS = ("epoch", "phase", "lambda", "encoder_lr", "train_loss", "L_sup", "L_cons",
              "val_mAP@0.10", "val_mAP@0.25", "val_mAP@0.50", "val_mAP@0.75")


@dataclass
class DetectionRun:
    model: Detector
    teacher: Detector
    rows: list
    best_epoch: int
    best_state: dict
    last_state: dict


def _voxels(item):
    """Raw array from a Sample, a Volume or an array."""
    for attr in ("volume", "voxels"):
        item = getattr(item, attr, item)
    return np.asarray(item)


def _cons_term(model, teacher, vol, weak, strong, seed, frozen, temperature):
    seed = list(np.atleast_1d(seed))
    vol = _voxels(vol)
    wv = apply_augmentation(vol, weak, seed + [0])
    sv = apply_augmentation(vol, strong, seed + [1])
    with T.no_grad():
        t_out = teacher(wv, frozen=True, token_seed=seed + [2])[-1]
    s_out = model(sv, frozen=frozen, token_seed=seed + [2])[-1]
    lc, ls, lk = consistency_losses(s_out, t_out, temperature)
    return lc + ls + lk


def train_detection(labeled, unlabeled, val, cfg, schedule, weak=WEAK, strong=STRONG, seed=0,
                    encoder_state=None, unlabeled_batch=2, temperature=2.0, on_epoch=None):
    """Run both phases; returns a DetectionRun.

    Phase I (epoch < phase_boundary) trains decoder + heads on a frozen
    encoder.  From the boundary on, the encoder follows ``encoder_lr`` and
    unlabeled volumes add ``lambda * (L_center + L_size + L_cls)``.  The
    logged ``L_cons`` is the weighted term.
    """
    if not labeled:
        raise ConfigurationError("labeled set is empty")
    model = Detector(cfg, seed=seed)
    if encoder_state is not None:
        model.encoder.load_state_dict(encoder_state)
    teacher = model.clone()
    dec_params = model.vdetr.parameters()
    opt = AdamW([{"params": dec_params, "lr": schedule.lr_decoder},
                 {"params": model.encoder.parameters(), "lr": 0.0}], weight_decay=schedule.weight_decay)
    rows = []
    best = (-np.inf, -1, None)
    grid_cache = {}
    u_cursor = 0
    step = 0
    for epoch in range(schedule.total_epochs):
        lam = lambda_schedule(epoch, schedule)
        elr = encoder_lr(epoch, schedule)
        opt.set_lr(schedule.decoder_lr(epoch), group=0)
        opt.set_lr(elr, group=1)
        frozen = elr == 0.0
        if not frozen:
            grid_cache.clear()
        use_cons = bool(unlabeled) and epoch >= schedule.phase_boundary
        totals, sups, conss = [], [], []
        for i in np.random.default_rng([seed, 10, epoch]).permutation(len(labeled)):
            s = labeled[i]
            grid = None
            if frozen:
                if i not in grid_cache:
                    grid_cache[i] = encoder_only(model.encoder, s.volume, frozen=True)
                grid = grid_cache[i]
            outs = model(s.volume, frozen=frozen, token_seed=[seed, 11, step], grid=grid)
            if not all(np.isfinite(o.logits.data).all() and np.isfinite(o.centers.data).all()
                       and np.isfinite(o.sizes.data).all() for o in outs):
                raise NumericError(f"non-finite detector output at epoch {epoch}, step {step}", model.state_dict())
            loss = supervised_detection_loss(outs, s.centers, s.sizes, s.categories, cfg)
            l_sup = loss.item()
            weighted = 0.0
            if use_cons:
                cons = None
                for j in range(unlabeled_batch):
                    u = unlabeled[u_cursor % len(unlabeled)]
                    u_cursor += 1
                    term = _cons_term(model, teacher, u, weak, strong, [seed, 12, step, j], frozen, temperature)
                    cons = term if cons is None else cons + term
                cons = cons * (1.0 / unlabeled_batch)
                if lam > 0.0:
                    loss = loss + cons * lam
                    weighted = lam * cons.item()
            total = loss.item()
            if not np.isfinite(total):
                # parameters are still those of the last finite step
                raise NumericError(f"non-finite detection loss at epoch {epoch}, step {step}", model.state_dict())
            model.zero_grad()
            loss.backward()
            if schedule.grad_clip > 0:
                clip_grad_norm(model.parameters(), schedule.grad_clip)
            opt.step()
            ema_update(teacher, model, schedule.ema_decay)
            totals.append(total)
            sups.append(l_sup)
            conss.append(weighted)
            step += 1
        maps = evaluate_map(model, val, seed)
        row = {"epoch": epoch, "phase": schedule.phase(epoch), "lambda": lam, "encoder_lr": elr,
               "train_loss": float(np.mean(totals)), "L_sup": float(np.mean(sups)),
               "L_cons": float(np.mean(conss))}
        for t in MAP_THRESHOLDS:
            row[f"val_mAP@{t:.2f}"] = maps[float(t)]
        rows.append(row)
        score = maps[0.5]
        if np.isfinite(score) and score > best[0]:
            best = (score, epoch, model.state_dict())
        if on_epoch is not None:
            on_epoch(row, model)
    if best[2] is None:
        best = (float("nan"), schedule.total_epochs - 1, model.state_dict())
    return DetectionRun(model, teacher, rows, best[1], best[2], model.state_dict())
