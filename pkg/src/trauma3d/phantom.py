"""Synthetic CT-like phantoms with exact ground truth.

Each phantom is a smooth textured background with non-touching ellipsoidal
"injuries".  The mask stores ``category + 1`` inside each ellipsoid, boxes are
the exact inclusive hulls, and the 7-bit label vector marks which categories
occur.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .volume import BoxCorners, SegMask, Volume, VolumeMeta, extract_boxes, save_rvol

N_CATEGORIES = 7
DEFAULT_BANDS = tuple((0.50 + 0.07 * i, 0.55 + 0.07 * i) for i in range(N_CATEGORIES))


class PlacementError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    n_objects: int = 2
    categories: tuple | None = None          # per-slot category ids; random when None
    bands: tuple = DEFAULT_BANDS
    background: float = 0.25
    texture_amplitude: float = 0.05
    noise_sigma: float = 0.01
    semi_axes_range: tuple = (2, 5)
    spacing: tuple = (2.0, 1.0, 1.0)
    seed: int = 0
    objects: tuple | None = None             # explicit ((category, center, semi_axes), ...)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        for lo, hi in self.bands:
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"intensity band {(lo, hi)} outside [0, 1]")


def ellipsoid_mask(dims, center, semi_axes):
    zz, yy, xx = np.ogrid[:dims[0], :dims[1], :dims[2]]
    r = sum(((g - c) / a) ** 2 for g, c, a in zip((zz, yy, xx), center, semi_axes))
    return r <= 1.0


def _hull(center, semi):
    return BoxCorners(*(c - a for c, a in zip(center, semi)), *(c + a for c, a in zip(center, semi)))


def _separated(a, b):
    # a one-voxel gap on some axis keeps hulls from touching under 26-connectivity
    return any(a[i + 3] + 1 < b[i] or b[i + 3] + 1 < a[i] for i in range(3))


def _background(spec, rng):
    coarse = rng.standard_normal(tuple(max(2, d // 8) for d in spec.dims))
    zoom = [d / c for d, c in zip(spec.dims, coarse.shape)]
    smooth = ndimage.zoom(coarse, zoom, order=1, mode="nearest")[:spec.dims[0], :spec.dims[1], :spec.dims[2]]
    smooth = smooth / (np.abs(smooth).max() + 1e-12)
    return spec.background + spec.texture_amplitude * smooth


def _place(spec, rng):
    if spec.objects is not None:
        placed = [(int(c), tuple(int(v) for v in ctr), tuple(int(v) for v in ax)) for c, ctr, ax in spec.objects]
        for _, ctr, ax in placed:
            box = _hull(ctr, ax)
            if min(box[:3]) < 0 or any(box[3 + i] > spec.dims[i] - 1 for i in range(3)):
                raise PlacementError(f"object at {ctr} with semi-axes {ax} leaves the volume")
        return placed
    placed, hulls = [], []
    lo, hi = spec.semi_axes_range
    for slot in range(spec.n_objects):
        cat = int(spec.categories[slot]) if spec.categories is not None else int(rng.integers(N_CATEGORIES))
        for _ in range(100):
            semi = tuple(int(v) for v in rng.integers(lo, hi + 1, size=3))
            if any(2 * a + 1 > d for a, d in zip(semi, spec.dims)):
                continue
            center = tuple(int(rng.integers(a, d - a)) for a, d in zip(semi, spec.dims))
            hull = _hull(center, semi)
            if all(_separated(hull, h) for h in hulls):
                placed.append((cat, center, semi))
                hulls.append(hull)
                break
        else:
            raise PlacementError(f"could not place object {slot} in {spec.dims} after 100 attempts")
    return placed


def generate_phantom(spec):
    """Return ``(Volume, SegMask, boxes, labels)`` for a PhantomSpec.

    ``boxes`` is ``[(BoxCorners, mask_label), ...]`` in extract_boxes order and
    ``labels`` a length-7 int array.
    """
    rng = np.random.default_rng(np.uint64(spec.seed))
    objects = _place(spec, rng)
    vox = _background(spec, rng)
    labels_arr = np.zeros(spec.dims, dtype=np.uint8)
    boxes = []
    for cat, center, semi in objects:
        inside = ellipsoid_mask(spec.dims, center, semi)
        lo, hi = spec.bands[cat]
        vox[inside] = rng.uniform(lo, hi)
        labels_arr[inside] = cat + 1
        boxes.append((_hull(center, semi), cat + 1))
    vox = vox + spec.noise_sigma * rng.standard_normal(spec.dims)
    vox = np.clip(vox, 0.0, 1.0).astype(np.float32)
    boxes.sort(key=lambda b: (b[0][:3], b[1], b[0][3:]))
    label_vec = np.zeros(N_CATEGORIES, dtype=np.int64)
    for cat, _, _ in objects:
        label_vec[cat] = 1
    meta = VolumeMeta(spec.spacing, 1.0, 0.0)
    return Volume(vox, meta, normalized=True), SegMask(labels_arr, spec.spacing), boxes, label_vec


def to_raw(vol, slope=1.0, intercept=-1024.0, window=(-100.0, 300.0)):
    """Invert windowing so a normalized phantom looks like stored scanner values."""
    lo, hi = window
    hu = vol.voxels.astype(np.float64) * (hi - lo) + lo
    raw = (hu - intercept) / slope
    return Volume(raw, VolumeMeta(vol.meta.spacing, slope, intercept), normalized=False)


def _file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def derive_seeds(seed, n):
    return [int(s.generate_state(1, np.uint64)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_dataset(n_labeled, n_unlabeled, n_val, n_test, base_spec, seed, out_dir, compress=False):
    """Generate a seed-derived phantom set under ``out_dir`` and write ``manifest.json``.

    Labeled, val and test volumes carry mask + boxes; unlabeled ones carry neither.
    """
    counts = {"labeled": n_labeled, "unlabeled": n_unlabeled, "val": n_val, "test": n_test}
    if min(counts.values()) < 0:
        raise ValueError("counts must be >= 0")
    os.makedirs(out_dir, exist_ok=True)
    seeds = iter(derive_seeds(seed, sum(counts.values())))
    manifest = {role: [] for role, n in counts.items() if n > 0 or role != "unlabeled"}
    manifest["labels"] = {}
    manifest["hashes"] = {}
    ext = ".rvol.gz" if compress else ".rvol"
    for role, n in counts.items():
        for i in range(n):
            spec = replace(base_spec, seed=next(seeds))
            vol, mask, boxes, labels = generate_phantom(spec)
            rel = f"{role}_{i:04d}{ext}"
            path = os.path.join(out_dir, rel)
            if role == "unlabeled":
                save_rvol(path, vol)
            else:
                save_rvol(path, vol, mask, [b for b, _ in boxes])
                manifest["labels"][rel] = labels.tolist()
            manifest[role].append(rel)
            manifest["hashes"][rel] = _file_hash(path)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(path):
    """Read a manifest; returns ``(manifest, base_dir)``."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        return json.load(fh), os.path.dirname(os.path.abspath(path))


def check_boxes(mask, boxes, connectivity=26, min_voxels=0):
    """True when extract_boxes on ``mask`` reproduces ``boxes`` exactly."""
    return extract_boxes(mask, connectivity, min_voxels) == list(boxes)
