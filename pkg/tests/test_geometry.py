import itertools

import numpy as np
import pytest

from trauma3d import geometry as G
from trauma3d.geometry import BBox3D, Detection


def brute_force_assignment(cost):
    n, m = cost.shape
    best = np.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = min(best, sum(cost[i, perm[i]] for i in range(n)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = min(best, sum(cost[perm[j], j] for j in range(m)))
    return best


def voxel_count_iou(a, b):
    """IoU of integer-corner boxes by counting unit cells."""
    alo, ahi = [np.rint(c).astype(int) for c in a.corners()]
    blo, bhi = [np.rint(c).astype(int) for c in b.corners()]
    lo = np.minimum(alo, blo)
    hi = np.maximum(ahi, bhi)
    grid = np.zeros(hi - lo, dtype=np.int8)
    grid[tuple(slice(s - l, e - l) for s, e, l in zip(alo, ahi, lo))] += 1
    grid[tuple(slice(s - l, e - l) for s, e, l in zip(blo, bhi, lo))] += 1
    return (grid == 2).sum() / (grid > 0).sum()


def random_int_box(rng, extent=8):
    lo = rng.integers(0, extent, 3)
    return BBox3D.from_corners(lo, lo + rng.integers(1, 5, 3))


class TestVertices:
    def test_unit_cube(self):
        v = G.vertices(BBox3D((0, 0, 0), (1, 1, 1)))
        assert v.shape == (8, 3)
        assert {tuple(p) for p in v} == set(itertools.product((-0.5, 0.5), repeat=3))
        np.testing.assert_array_equal(v[0], [-0.5, -0.5, -0.5])
        np.testing.assert_array_equal(v[1], [-0.5, -0.5, 0.5])
        np.testing.assert_array_equal(v[4], [0.5, -0.5, -0.5])
        np.testing.assert_array_equal(v[7], [0.5, 0.5, 0.5])

    def test_translation_equivariance(self, rng):
        b = BBox3D(rng.normal(size=3), rng.uniform(0.1, 2, 3))
        t = rng.normal(size=3)
        moved = BBox3D(np.asarray(b.center) + t, b.size)
        np.testing.assert_allclose(G.vertices(moved), G.vertices(b) + t, atol=1e-12)

    def test_mean_is_center(self, rng):
        b = BBox3D(rng.normal(size=3), rng.uniform(0.1, 2, 3))
        np.testing.assert_allclose(G.vertices(b).mean(0), b.center, atol=1e-12)


class TestBox:
    def test_corner_roundtrip(self, rng):
        lo, hi = rng.normal(size=3), rng.normal(size=3) + 3
        b = BBox3D.from_corners(lo, hi)
        np.testing.assert_allclose(b.corners()[0], lo)
        np.testing.assert_allclose(b.corners()[1], hi)

    def test_inclusive_and_frames(self):
        b = BBox3D.from_inclusive((12, 10, 8, 20, 22, 24))
        assert b.size == (9.0, 13.0, 17.0)
        m = b.to_model((32, 32, 32))
        assert m.frame == "model"
        assert m.to_voxel((32, 32, 32)).center == pytest.approx(b.center)

    def test_nonpositive_size(self):
        with pytest.raises(ValueError):
            BBox3D((0, 0, 0), (1, 0, 1))


class TestIoU:
    def test_identical(self):
        b = BBox3D((1, 2, 3), (2, 3, 4))
        assert G.iou3d(b, b) == 1.0

    def test_disjoint(self):
        assert G.iou3d(BBox3D((0, 0, 0), (1, 1, 1)), BBox3D((5, 5, 5), (1, 1, 1))) == 0.0

    def test_closed_form(self):
        a = BBox3D.from_corners((0, 0, 0), (2, 2, 2))
        b = BBox3D.from_corners((1, 0, 0), (3, 2, 2))
        assert G.iou3d(a, b) == pytest.approx(1 / 3, abs=1e-15)

    def test_symmetry_and_scale(self, rng):
        for _ in range(100):
            a = BBox3D(rng.normal(size=3), rng.uniform(0.2, 3, 3))
            b = BBox3D(rng.normal(size=3), rng.uniform(0.2, 3, 3))
            k = rng.uniform(0.1, 10)
            assert G.iou3d(a, b) == G.iou3d(b, a)
            ak = BBox3D(np.asarray(a.center) * k, np.asarray(a.size) * k)
            bk = BBox3D(np.asarray(b.center) * k, np.asarray(b.size) * k)
            assert G.iou3d(ak, bk) == pytest.approx(G.iou3d(a, b), abs=1e-12)

    def test_integer_boxes_vs_voxel_count(self, rng):
        for _ in range(300):
            a, b = random_int_box(rng), random_int_box(rng)
            assert G.iou3d(a, b) == voxel_count_iou(a, b)

    def test_iou_matrix_agrees(self, rng):
        ca, sa = rng.normal(size=(4, 3)), rng.uniform(0.5, 2, (4, 3))
        cb, sb = rng.normal(size=(3, 3)), rng.uniform(0.5, 2, (3, 3))
        mat = G.iou_matrix(ca, sa, cb, sb)
        for i, j in itertools.product(range(4), range(3)):
            assert mat[i, j] == pytest.approx(G.iou3d(BBox3D(ca[i], sa[i]), BBox3D(cb[j], sb[j])), abs=1e-12)


class TestHungarian:
    def test_single(self):
        r, c = G.hungarian_match([[3.0]])
        assert r.tolist() == [0] and c.tolist() == [0]

    def test_permutation(self, rng):
        perm = rng.permutation(6)
        cost = np.ones((6, 6))
        cost[np.arange(6), perm] = 0
        r, c = G.hungarian_match(cost)
        assert c.tolist() == perm.tolist()

    @pytest.mark.parametrize("shape", [(5, 5), (6, 4), (4, 6), (7, 7), (1, 5), (5, 1)])
    def test_brute_force(self, rng, shape):
        for _ in range(10):
            cost = rng.normal(size=shape)
            r, c = G.hungarian_match(cost)
            assert len(r) == min(shape)
            assert len(set(r.tolist())) == len(r) and len(set(c.tolist())) == len(c)
            assert cost[r, c].sum() == pytest.approx(brute_force_assignment(cost), abs=1e-9)

    def test_beats_random_assignments(self, rng):
        cost = rng.uniform(size=(9, 12))
        r, c = G.hungarian_match(cost)
        best = cost[r, c].sum()
        for _ in range(1000):
            cols = rng.permutation(12)[:9]
            assert best <= cost[np.arange(9), cols].sum() + 1e-12

    def test_deterministic_ties(self):
        r, c = G.hungarian_match(np.zeros((3, 3)))
        assert r.tolist() == [0, 1, 2]
        assert c.tolist() == G.hungarian_match(np.zeros((3, 3)))[1].tolist()

    def test_empty(self):
        r, c = G.hungarian_match(np.zeros((0, 3)))
        assert r.size == 0 and c.size == 0


def slab(x0, x1):
    """Unit cross-section box spanning [x0, x1] along x."""
    return BBox3D.from_corners((0, 0, x0), (1, 1, x1))


def pr_enumeration_ap(flags, n_gt):
    """AP by enumerating every rank cutoff, then integrating over recall levels m / n_gt."""
    points = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += f
        points.append((tp / k, tp / n_gt))
    ap = 0.0
    for m in range(1, n_gt + 1):
        ps = [p for p, r in points if r >= m / n_gt - 1e-15]
        ap += (max(ps) if ps else 0.0) / n_gt
    return ap


def oracle_map(dets, gts, thr):
    """Independent greedy matcher + PR enumeration, using voxel-free closed-form IoU."""
    def iou(a, b):
        alo, ahi = a.corners()
        blo, bhi = b.corners()
        inter = 1.0
        for k in range(3):
            inter *= max(0.0, min(ahi[k], bhi[k]) - max(alo[k], blo[k]))
        return inter / (np.prod(a.size) + np.prod(b.size) - inter)

    cats = sorted({c for g in gts for _, c in g})
    aps = []
    for cat in cats:
        flat = [(v, i, d) for v, ds in enumerate(dets) for i, d in enumerate(ds) if d.category == cat]
        flat.sort(key=lambda t: -t[2].score)
        used = set()
        flags = []
        for v, _, d in flat:
            best, best_j = -1.0, None
            for j, (g, c) in enumerate(gts[v]):
                if c != cat or (v, j) in used:
                    continue
                val = iou(d.box, g)
                if val > best:
                    best, best_j = val, j
            if best_j is not None and best >= thr:
                used.add((v, best_j))
                flags.append(1)
            else:
                flags.append(0)
        n_gt = sum(1 for g in gts for _, c in g if c == cat)
        aps.append(pr_enumeration_ap(flags, n_gt))
    return float(np.mean(aps))


def micro_scene(rng, n_vol=3, n_cat=3):
    gts, dets = [], []
    for _ in range(n_vol):
        g = [(BBox3D(rng.uniform(0, 10, 3), rng.uniform(1, 3, 3)), int(rng.integers(n_cat)))
             for _ in range(rng.integers(0, 4))]
        d = []
        for box, c in g:
            for _ in range(rng.integers(0, 3)):
                jitter = BBox3D(np.asarray(box.center) + rng.normal(0, 0.4, 3),
                                np.asarray(box.size) * rng.uniform(0.7, 1.3, 3))
                d.append(Detection(jitter, c if rng.random() > 0.2 else int(rng.integers(n_cat)),
                                   float(np.round(rng.random(), 2))))
        for _ in range(rng.integers(0, 3)):
            d.append(Detection(BBox3D(rng.uniform(0, 10, 3), rng.uniform(1, 3, 3)), int(rng.integers(n_cat)),
                               float(np.round(rng.random(), 2))))
        gts.append(g)
        dets.append(d)
    if not any(gts):
        gts[0].append((BBox3D((5, 5, 5), (2, 2, 2)), 0))
    return dets, gts


class TestMAP:
    def test_perfect(self, rng):
        gts = [[(BBox3D(rng.uniform(0, 5, 3), (1, 2, 3)), c) for c in range(3)] for _ in range(3)]
        dets = [[Detection(b, c, 1.0) for b, c in g] for g in gts]
        assert G.map_at(dets, gts) == {t: 1.0 for t in G.MAP_THRESHOLDS}

    def test_zero_detections(self):
        gts = [[(BBox3D((0, 0, 0), (1, 1, 1)), 0)]]
        assert G.map_at([[]], gts) == {t: 0.0 for t in G.MAP_THRESHOLDS}

    def test_no_ground_truth(self):
        with pytest.raises(G.UndefinedMetricError):
            G.map_at([[]], [[]])

    def test_hand_enumerated_pr(self):
        gt1, gt2 = slab(0, 1), slab(10, 11)
        gts = [[(gt1, 0), (gt2, 0)]]
        dets = [[Detection(slab(0, 0.6), 0, 0.9), Detection(slab(10, 10.3), 0, 0.8),
                 Detection(slab(10, 10.55), 0, 0.7)]]
        # ranks: TP (P=1, R=.5), FP (P=.5, R=.5), TP (P=2/3, R=1) -> AP = .5*1 + .5*(2/3)
        assert G.map_at(dets, gts, thresholds=(0.5,))[0.5] == pytest.approx(0.5 + 1 / 3, abs=1e-12)
        assert pr_enumeration_ap([1, 0, 1], 2) == pytest.approx(5 / 6, abs=1e-12)

    def test_duplicates_are_false_positives(self):
        g = slab(0, 1)
        dets = [[Detection(g, 0, 0.9), Detection(g, 0, 0.8)]]
        report = G.evaluate_detections(dets, [[(g, 0)]], thresholds=(0.5,))
        assert report["ap"][0.5][0] == 1.0
        assert report["counts"]["detections"] == {0: 2}

    def test_micro_scenes_vs_oracle(self, rng):
        for _ in range(20):
            dets, gts = micro_scene(rng)
            got = G.map_at(dets, gts)
            for t in G.MAP_THRESHOLDS:
                assert got[t] == pytest.approx(oracle_map(dets, gts, t), abs=1e-9)

    def test_monotone_in_threshold(self, rng):
        for _ in range(50):
            dets, gts = micro_scene(rng)
            m = G.map_at(dets, gts, thresholds=np.linspace(0.05, 0.95, 19))
            vals = [m[t] for t in sorted(m)]
            assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_report_json_keys(self):
        g = slab(0, 1)
        rep = G.report_json(G.evaluate_detections([[Detection(g, 2, 0.5)]], [[(g, 2)]]))
        assert set(rep["map"]) == {"0.10", "0.25", "0.50", "0.75"}
        assert rep["ap"]["0.50"] == {"2": 1.0}
