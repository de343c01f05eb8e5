import json

import numpy as np
import pytest

from trauma3d import phantom as P
from trauma3d.volume import extract_boxes, load_rvol


def ellipsoid_hull_scan(dims, center, semi):
    """Voxel scan of the ellipsoid inequality."""
    pts = []
    for z in range(dims[0]):
        for y in range(dims[1]):
            for x in range(dims[2]):
                if sum(((v - c) / a) ** 2 for v, c, a in zip((z, y, x), center, semi)) <= 1.0:
                    pts.append((z, y, x))
    pts = np.array(pts)
    return tuple(pts.min(0).tolist()) + tuple(pts.max(0).tolist())


def test_no_objects():
    vol, mask, boxes, labels = P.generate_phantom(P.PhantomSpec(n_objects=0, seed=1))
    assert not mask.labels.any()
    assert boxes == []
    assert labels.tolist() == [0] * 7
    assert vol.normalized and 0 <= vol.voxels.min() and vol.voxels.max() <= 1


def test_same_seed_bitwise():
    spec = P.PhantomSpec(n_objects=3, seed=99)
    a, b = P.generate_phantom(spec), P.generate_phantom(spec)
    assert a[0].voxels.tobytes() == b[0].voxels.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    assert a[2] == b[2] and a[3].tolist() == b[3].tolist()


def test_known_ellipsoid_box():
    assert ellipsoid_hull_scan((32, 32, 32), (16, 16, 16), (4, 6, 8)) == (12, 10, 8, 20, 22, 24)
    spec = P.PhantomSpec(objects=((0, (16, 16, 16), (4, 6, 8)),))
    _, mask, boxes, labels = P.generate_phantom(spec)
    assert boxes == [((12, 10, 8, 20, 22, 24), 1)]
    assert labels.tolist() == [1, 0, 0, 0, 0, 0, 0]


@pytest.mark.parametrize("seed", range(12))
def test_extract_boxes_reproduces_generator(seed):
    spec = P.PhantomSpec(dims=(24, 28, 32), n_objects=3, seed=seed)
    _, mask, boxes, labels = P.generate_phantom(spec)
    assert extract_boxes(mask) == boxes
    assert extract_boxes(mask, connectivity=6) == boxes
    assert sorted({l - 1 for _, l in boxes}) == np.flatnonzero(labels).tolist()
    for b, _ in boxes:
        assert min(b[:3]) >= 0 and all(b[3 + i] < spec.dims[i] for i in range(3))


def test_object_intensity_within_band():
    spec = P.PhantomSpec(dims=(32, 32, 32), n_objects=3, noise_sigma=0.02, seed=4)
    vol, mask, boxes, _ = P.generate_phantom(spec)
    for _, lab in boxes:
        inside = vol.voxels[mask.labels == lab]
        lo, hi = spec.bands[lab - 1]
        tol = 3 * spec.noise_sigma / np.sqrt(inside.size)
        assert lo - tol <= inside.mean() <= hi + tol


def test_placement_error():
    with pytest.raises(P.PlacementError):
        P.generate_phantom(P.PhantomSpec(dims=(8, 8, 8), n_objects=5, semi_axes_range=(3, 3), seed=0))


def test_explicit_object_outside():
    with pytest.raises(P.PlacementError):
        P.generate_phantom(P.PhantomSpec(objects=((0, (2, 16, 16), (4, 4, 4)),)))


def test_make_dataset_counts(tmp_path):
    base = P.PhantomSpec(dims=(16, 16, 16), n_objects=1, semi_axes_range=(2, 3))
    man = P.make_dataset(4, 8, 2, 2, base, seed=5, out_dir=tmp_path)
    files = man["labeled"] + man["unlabeled"] + man["val"] + man["test"]
    assert len(files) == len(set(files)) == 16
    digests = {man["hashes"][f] for f in files}
    assert len(digests) == 16
    for f in man["labeled"]:
        _, mask, boxes = load_rvol(tmp_path / f)
        assert mask is not None and boxes
    for f in man["unlabeled"]:
        _, mask, boxes = load_rvol(tmp_path / f)
        assert mask is None and boxes is None
        assert f not in man["labels"]
    assert all(len(man["labels"][f]) == 7 for f in man["labeled"] + man["val"] + man["test"])
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == man


def test_make_dataset_no_unlabeled(tmp_path):
    man = P.make_dataset(1, 0, 1, 0, P.PhantomSpec(dims=(16, 16, 16), n_objects=1), seed=0, out_dir=tmp_path)
    assert "unlabeled" not in man


def test_make_dataset_reproducible(tmp_path):
    base = P.PhantomSpec(dims=(16, 16, 16), n_objects=2, semi_axes_range=(2, 3))
    a = P.make_dataset(2, 2, 1, 1, base, seed=8, out_dir=tmp_path / "a", compress=True)
    b = P.make_dataset(2, 2, 1, 1, base, seed=8, out_dir=tmp_path / "b", compress=True)
    assert a["hashes"] == b["hashes"]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    c = P.make_dataset(2, 2, 1, 1, base, seed=9, out_dir=tmp_path / "c", compress=True)
    assert set(a["hashes"].values()).isdisjoint(c["hashes"].values())
