"""CT volume preprocessing: HU conversion, windowing, resampling, pad/crop, box extraction.

Also holds the ``RVL1`` volume container used on disk.
"""
from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

HU_WINDOW = (-100.0, 300.0)
DEFAULT_SPACING = (2.0, 1.0, 1.0)
DEFAULT_DIMS = (512, 336, 336)


class ConfigurationError(ValueError):
    pass


class DegenerateVolumeError(ValueError):
    pass


class EmptyMaskWarning(UserWarning):
    pass


@dataclass
class VolumeMeta:
    spacing: tuple = (1.0, 1.0, 1.0)
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigurationError(f"spacing must be three positive values, got {self.spacing}")


@dataclass
class Volume:
    voxels: np.ndarray
    meta: VolumeMeta = field(default_factory=VolumeMeta)
    normalized: bool = False

    @property
    def dims(self):
        return self.voxels.shape


@dataclass
class SegMask:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def dims(self):
        return self.labels.shape


class BoxCorners(NamedTuple):
    """Inclusive voxel index hull."""
    min_z: int
    min_y: int
    min_x: int
    max_z: int
    max_y: int
    max_x: int


def to_hounsfield(raw, slope, intercept):
    return np.asarray(raw, dtype=np.float64) * slope + intercept


def clip_normalize(hu, lo=HU_WINDOW[0], hi=HU_WINDOW[1]):
    if lo >= hi:
        raise ConfigurationError(f"window lower bound {lo} must be below upper bound {hi}")
    return (np.clip(hu, lo, hi) - lo) / (hi - lo)


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def resampled_dims(dims, spacing, target_spacing):
    return tuple(int(np.floor(n * s / t + 0.5)) for n, s, t in zip(dims, spacing, target_spacing))


def _source_coords(n_out, n_in, ratio):
    # voxel centres sit at (index + 0.5) * spacing in physical units
    u = (np.arange(n_out) + 0.5) * ratio - 0.5
    return np.clip(u, 0.0, n_in - 1)


def _linear_axis(arr, axis, u):
    i0 = np.floor(u).astype(np.int64)
    i1 = np.minimum(i0 + 1, arr.shape[axis] - 1)
    frac = (u - i0).reshape([-1 if a == axis else 1 for a in range(arr.ndim)])
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    return a0 + (a1 - a0) * frac


def resample_array(arr, spacing, target_spacing, mode="trilinear"):
    """Resample a (Z,Y,X) array from ``spacing`` to ``target_spacing``."""
    if min(target_spacing) <= 0 or min(spacing) <= 0:
        raise ConfigurationError("spacings must be positive")
    dims = resampled_dims(arr.shape, spacing, target_spacing)
    if min(dims) < 1:
        raise DegenerateVolumeError(f"resampling {arr.shape} at {spacing} -> {target_spacing} gives {dims}")
    out = arr
    for axis, (n_out, s, t) in enumerate(zip(dims, spacing, target_spacing)):
        if n_out == arr.shape[axis] and s == t:
            continue
        u = _source_coords(n_out, arr.shape[axis], t / s)
        if mode == "trilinear":
            out = _linear_axis(out.astype(np.float64), axis, u)
        elif mode == "nearest":
            idx = np.clip(_round_half_away(u), 0, arr.shape[axis] - 1).astype(np.int64)
            out = np.take(out, idx, axis=axis)
        else:
            raise ConfigurationError(f"unknown interpolation mode {mode!r}")
    return out


def resample(vol, target_spacing, mode="trilinear"):
    """Resample a Volume (trilinear) or SegMask (nearest only)."""
    target_spacing = tuple(float(t) for t in target_spacing)
    if isinstance(vol, SegMask):
        if mode != "nearest":
            raise ConfigurationError("label masks must be resampled with mode='nearest'")
        return SegMask(resample_array(vol.labels, vol.spacing, target_spacing, "nearest"), target_spacing)
    voxels = resample_array(vol.voxels, vol.meta.spacing, target_spacing, mode)
    return Volume(voxels, replace(vol.meta, spacing=target_spacing), vol.normalized)


def pad_crop_offsets(src_dims, target_dims):
    """Per-axis shift applied to source indices by :func:`center_pad_crop`."""
    return tuple((t - n) // 2 if n < t else -((n - t) // 2) for n, t in zip(src_dims, target_dims))


def center_pad_crop_array(arr, target_dims, fill=0):
    target_dims = tuple(int(t) for t in target_dims)
    if min(target_dims) < 1:
        raise ConfigurationError(f"target dims must be positive, got {target_dims}")
    out = np.full(target_dims, fill, dtype=arr.dtype)
    src, dst = [], []
    for n, t in zip(arr.shape, target_dims):
        if n <= t:
            lo = (t - n) // 2
            src.append(slice(0, n))
            dst.append(slice(lo, lo + n))
        else:
            start = (n - t) // 2
            src.append(slice(start, start + t))
            dst.append(slice(0, t))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def center_pad_crop(vol, target_dims):
    if isinstance(vol, SegMask):
        return SegMask(center_pad_crop_array(vol.labels, target_dims), vol.spacing)
    if isinstance(vol, Volume):
        return Volume(center_pad_crop_array(vol.voxels, target_dims), vol.meta, vol.normalized)
    return center_pad_crop_array(np.asarray(vol), target_dims)


def _structure(connectivity):
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ConfigurationError(f"connectivity must be 6 or 26, got {connectivity}")


def extract_boxes(mask, connectivity=26, min_voxels=8):
    """Tight inclusive hull per connected component of each nonzero label.

    Returns ``[(BoxCorners, label), ...]`` ordered by ascending min corner.
    """
    labels = mask.labels if isinstance(mask, SegMask) else np.asarray(mask)
    structure = _structure(connectivity)
    found = []
    for value in np.unique(labels):
        if value == 0:
            continue
        comp, n = ndimage.label(labels == value, structure=structure)
        counts = np.bincount(comp.ravel(), minlength=n + 1)
        for k, sl in enumerate(ndimage.find_objects(comp), start=1):
            if sl is None or counts[k] < min_voxels:
                continue
            box = BoxCorners(*(s.start for s in sl), *(s.stop - 1 for s in sl))
            found.append((box, int(value)))
    found.sort(key=lambda b: (b[0][:3], b[1], b[0][3:]))
    return found


def union_box(boxes):
    if not boxes:
        return None
    arr = np.array([b for b, _ in boxes])
    return BoxCorners(*arr[:, :3].min(axis=0).tolist(), *arr[:, 3:].max(axis=0).tolist())


def shift_box(box, offset):
    return BoxCorners(*(int(b + o) for b, o in zip(box, tuple(offset) * 2)))


def normalize_volume(vol, lo=HU_WINDOW[0], hi=HU_WINDOW[1]):
    """Apply HU conversion then window normalization (no-op if already normalized)."""
    if vol.normalized:
        return vol
    hu = to_hounsfield(vol.voxels, vol.meta.rescale_slope, vol.meta.rescale_intercept)
    return Volume(clip_normalize(hu, lo, hi), vol.meta, normalized=True)


def preprocess_unlabeled(volume, target_spacing=DEFAULT_SPACING, target_dims=DEFAULT_DIMS, window=HU_WINDOW):
    vol = normalize_volume(volume, *window)
    vol = resample(vol, target_spacing, "trilinear")
    return center_pad_crop(vol, target_dims)


def preprocess_labeled(volume, mask, target_spacing=DEFAULT_SPACING, target_dims=DEFAULT_DIMS,
                       window=HU_WINDOW, connectivity=26, min_voxels=8, roi_crop=True):
    """Full labeled pipeline; returns ``(Volume, SegMask, boxes)`` on a common grid.

    Boxes are re-derived on the final grid.  With ``roi_crop`` both arrays are
    first cropped to the union hull of all components.
    """
    vol = normalize_volume(volume, *window)
    vol = resample(vol, target_spacing, "trilinear")
    if not isinstance(mask, SegMask):
        mask = SegMask(np.asarray(mask), volume.meta.spacing)
    seg = resample(mask, target_spacing, "nearest")
    if seg.dims != vol.dims:
        seg = center_pad_crop(seg, vol.dims)
    boxes = extract_boxes(seg, connectivity, min_voxels)
    if not boxes:
        warnings.warn("label mask has no components; emitting volume without boxes", EmptyMaskWarning)
    elif roi_crop:
        roi = union_box(boxes)
        sl = tuple(slice(roi[a], roi[a + 3] + 1) for a in range(3))
        vol = Volume(vol.voxels[sl], vol.meta, vol.normalized)
        seg = SegMask(seg.labels[sl], seg.spacing)
    vol = center_pad_crop(vol, target_dims)
    seg = center_pad_crop(seg, target_dims)
    return vol, seg, extract_boxes(seg, connectivity, min_voxels)


# -- RVL1 container ---------------------------------------------------------
RVOL_MAGIC = b"RVL1"
_VTAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def rvol_dumps(vol, mask=None, boxes=None):
    """Serialize a Volume with optional mask and box table.

    Layout: magic | dims 3xu64 | spacing 3xf64 | slope f64 | intercept f64 |
    normalized u8 | dtype tag u8 | mask flag u8 [+ uint8 voxels] |
    box flag u8 [+ count u64 + 6xi64 per box] | raw LE voxels.
    """
    arr = np.asarray(vol.voxels)
    tag = 1 if arr.dtype == np.float32 else 2
    parts = [
        RVOL_MAGIC,
        struct.pack("<3Q", *arr.shape),
        struct.pack("<3d", *vol.meta.spacing),
        struct.pack("<2d", vol.meta.rescale_slope, vol.meta.rescale_intercept),
        struct.pack("<BB", int(vol.normalized), tag),
    ]
    if mask is not None:
        labels = mask.labels if isinstance(mask, SegMask) else np.asarray(mask)
        if labels.shape != arr.shape:
            raise ValueError(f"mask dims {labels.shape} != volume dims {arr.shape}")
        if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
            raise ValueError("mask labels must fit in uint8")
        parts += [b"\x01", np.ascontiguousarray(labels, dtype=np.uint8).tobytes()]
    else:
        parts.append(b"\x00")
    if boxes is not None:
        table = np.array([tuple(b[0]) if isinstance(b, tuple) and len(b) == 2 else tuple(b) for b in boxes],
                         dtype="<i8").reshape(-1, 6)
        parts += [b"\x01", struct.pack("<Q", len(table)), table.tobytes()]
    else:
        parts.append(b"\x00")
    parts.append(np.ascontiguousarray(arr, dtype=_VTAGS[tag]).tobytes())
    return b"".join(parts)


def rvol_loads(buf):
    """Inverse of :func:`rvol_dumps`: returns ``(Volume, SegMask|None, [BoxCorners]|None)``."""
    if buf[:4] != RVOL_MAGIC:
        raise ValueError("not an RVL1 volume")
    pos = 4
    dims = struct.unpack_from("<3Q", buf, pos); pos += 24
    spacing = struct.unpack_from("<3d", buf, pos); pos += 24
    slope, intercept = struct.unpack_from("<2d", buf, pos); pos += 16
    normalized, tag = struct.unpack_from("<BB", buf, pos); pos += 2
    n = int(np.prod(dims))
    mask = None
    if buf[pos]:
        pos += 1
        mask = SegMask(np.frombuffer(buf, np.uint8, n, pos).reshape(dims).copy(), spacing)
        pos += n
    else:
        pos += 1
    boxes = None
    if buf[pos]:
        pos += 1
        (count,) = struct.unpack_from("<Q", buf, pos); pos += 8
        table = np.frombuffer(buf, "<i8", 6 * count, pos).reshape(count, 6)
        boxes = [BoxCorners(*map(int, row)) for row in table]
        pos += 48 * count
    else:
        pos += 1
    dt = _VTAGS[tag]
    voxels = np.frombuffer(buf, dt, n, pos).reshape(dims).copy()
    pos += n * dt.itemsize
    if pos != len(buf):
        raise ValueError(f"{len(buf) - pos} trailing bytes in RVL1 payload")
    meta = VolumeMeta(spacing, slope, intercept)
    return Volume(voxels, meta, bool(normalized)), mask, boxes


def save_rvol(path, vol, mask=None, boxes=None):
    """Write an RVL1 file; a ``.gz`` suffix selects gzip compression."""
    buf = rvol_dumps(vol, mask, boxes)
    if str(path).endswith(".gz"):
        # mtime=0 keeps compressed output byte-stable across runs
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as fh:
            fh.write(buf)
    else:
        with open(path, "wb") as fh:
            fh.write(buf)


def load_rvol(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return rvol_loads(fh.read())


def labeled_boxes(mask, connectivity=26, min_voxels=8):
    """Boxes with categories (label - 1) for a SegMask, as used by training."""
    return [(b, lab - 1) for b, lab in extract_boxes(mask, connectivity, min_voxels)]
