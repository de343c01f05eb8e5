import itertools

import numpy as np
import pytest

from trauma3d import checkpoint, nn
from trauma3d import tensor as T
from trauma3d.tensor import Tensor

from conftest import assert_grad_close, numeric_grad


def matmul_oracle(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv3d_oracle(x, w, stride, pad):
    C, D, H, W = x.shape
    O, _, k, _, _ = w.shape
    xp = np.zeros((C, D + 2 * pad, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + D, pad:pad + H, pad:pad + W] = x
    Do, Ho, Wo = [(n + 2 * pad - k) // stride + 1 for n in (D, H, W)]
    out = np.zeros((O, Do, Ho, Wo))
    for o in range(O):
        for z in range(Do):
            for y in range(Ho):
                for xx in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for i in range(k):
                            for j in range(k):
                                for l in range(k):
                                    acc += w[o, c, i, j, l] * xp[c, z * stride + i, y * stride + j, xx * stride + l]
                    out[o, z, y, xx] = acc
    return out


class TestMatmul:
    def test_identity(self, f64, rng):
        b = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_scalar(self, f64):
        assert T.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_triple_loop(self, f64, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), rtol=0, atol=1e-12)

    def test_mismatch_names_shapes(self, f64):
        with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv3d:
    def test_identity_kernel(self, f64, rng):
        x = rng.normal(size=(1, 5, 6, 7))
        out = T.conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones_interior(self, f64):
        out = T.conv3d(Tensor(np.ones((1, 5, 5, 5))), Tensor(np.ones((1, 1, 3, 3, 3))), padding=1)
        assert out.data[0, 2, 2, 2] == 27.0

    def test_loop_oracle(self, f64, rng):
        x, w = rng.normal(size=(1, 8, 8, 8)), rng.normal(size=(1, 1, 3, 3, 3))
        np.testing.assert_allclose(T.conv3d(Tensor(x), Tensor(w)).data, conv3d_oracle(x, w, 1, 0), atol=1e-10)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_loop_oracle_multichannel(self, f64, rng, stride, pad):
        x, w = rng.normal(size=(2, 5, 6, 7)), rng.normal(size=(3, 2, 3, 3, 3))
        out = T.conv3d(Tensor(x), Tensor(w), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, conv3d_oracle(x, w, stride, pad), atol=1e-10)

    def test_output_extent(self, f64):
        out = T.conv3d(Tensor(np.zeros((1, 9, 8, 7))), Tensor(np.zeros((1, 1, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (1, 5, 4, 4)

    def test_nonpositive_extent(self, f64):
        with pytest.raises(T.DimensionError):
            T.conv3d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 1, 3, 3, 3))))


class TestSoftmax:
    def test_uniform(self, f64):
        np.testing.assert_allclose(T.softmax(Tensor(np.ones(4))).data, [0.25] * 4)

    def test_shift_invariance(self, f64, rng):
        x = rng.normal(size=(3, 5))
        a = T.softmax(Tensor(x), axis=1).data
        b = T.softmax(Tensor(x + 7.5), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_analytic(self, f64):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    @pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
    def test_rows_sum_to_one(self, f64, rng, scale):
        x = rng.normal(size=(20, 17)) * scale
        for axis in (0, 1):
            s = T.softmax(Tensor(x), axis=axis).data
            assert (s >= 0).all()
            np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-9)


class TestBackward:
    def test_sum_grad_ones(self, f64, rng):
        p = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        p.sum().backward()
        np.testing.assert_array_equal(p.grad, np.ones((2, 3, 4)))

    def test_mse_at_target(self, f64, rng):
        t = rng.normal(size=(5,))
        p = Tensor(t.copy(), requires_grad=True)
        ((p - Tensor(t)) ** 2).mean().backward()
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_nonscalar_loss(self, f64):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (p * 2.0).backward()

    def test_every_required_tensor_gets_grad(self, f64, rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        h = T.relu(a @ a)
        loss = T.sigmoid(h).sum()
        loss.backward()
        assert a.grad is not None and h.grad is not None

    def test_tape_order_matches_topological(self, f64, rng):
        x0 = rng.normal(size=(4, 4))
        grads = []
        for order in ("tape", "topo"):
            x = Tensor(x0.copy(), requires_grad=True)
            y = T.softmax(x @ x, axis=1)
            z = T.exp(y) * x + T.log(y + 1.0)
            loss = (z @ y).sum() + T.tsum(x * x)
            loss.backward(order=order)
            grads.append(x.grad)
        np.testing.assert_allclose(grads[0], grads[1], rtol=1e-12, atol=1e-14)

    def test_no_grad_records_nothing(self, f64):
        p = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = p * 2.0
        assert not y.requires_grad


def _check(build, *shapes, rng, positive=False):
    """Gradient-check ``sum(build(*tensors) * fixed_weights)`` for every input."""
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*ts)
    weights = rng.normal(size=out.shape)
    (out * Tensor(weights)).sum().backward()

    def f():
        with T.no_grad():
            return float((build(*[Tensor(a) for a in arrays]).data * weights).sum())

    for t, a in zip(ts, arrays):
        assert_grad_close(t.grad, numeric_grad(f, a))


PRIMITIVES = {
    "add": (lambda a, b: a + b, [(3, 4), (3, 4)], False),
    "add_bias": (lambda a, b: a + b, [(3, 4), (4,)], False),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)], False),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)], False),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)], True),
    "pow": (lambda a: a ** 1.5, [(3, 4)], True),
    "exp": (T.exp, [(3, 4)], False),
    "log": (T.log, [(3, 4)], True),
    "relu": (T.relu, [(3, 4)], False),
    "sigmoid": (T.sigmoid, [(3, 4)], False),
    "softplus": (T.softplus, [(3, 4)], False),
    "signed_log": (lambda a: T.signed_log(a, 0.1), [(3, 4)], False),
    "maximum": (T.maximum, [(3, 4), (3, 4)], False),
    "minimum": (T.minimum, [(3, 4), (3, 4)], False),
    "sum_axis": (lambda a: T.tsum(a, axis=1), [(3, 4)], False),
    "mean": (lambda a: T.mean(a, axis=0, keepdims=True), [(3, 4)], False),
    "matmul": (T.matmul, [(3, 4), (4, 2)], False),
    "softmax": (lambda a: T.softmax(a, axis=1), [(3, 4)], False),
    "log_softmax": (lambda a: T.log_softmax(a, axis=1), [(3, 4)], False),
    "reshape_transpose": (lambda a: a.reshape(4, 3).transpose(1, 0), [(3, 4)], False),
    "index": (lambda a: a[np.array([0, 2, 2]), 1:], [(3, 4)], False),
    "concat": (lambda a, b: T.concatenate([a, b], axis=1), [(3, 4), (3, 2)], False),
    "stack": (lambda a, b: T.stack([a, b], axis=1), [(3, 4), (3, 4)], False),
    "conv3d": (lambda x, w, b: T.conv3d(x, w, b, stride=1, padding=1), [(2, 4, 4, 4), (3, 2, 3, 3, 3), (3,)], False),
    "conv3d_stride2": (lambda x, w: T.conv3d(x, w, None, stride=2, padding=1), [(2, 5, 4, 4), (2, 2, 3, 3, 3)], False),
    "conv_transpose3d": (T.conv_transpose3d, [(2, 2, 3, 2), (2, 3, 2, 2, 2), (3,)], False),
    "max_pool3d": (T.max_pool3d, [(2, 4, 4, 6)], False),
    "layer_norm": (T.layer_norm, [(3, 5), (5,), (5,)], False),
    "cross_entropy": (lambda z: T.cross_entropy(z, [1, 0, 3]), [(3, 4)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradcheck(f64, rng, name):
    build, shapes, positive = PRIMITIVES[name]
    _check(build, *shapes, rng=rng, positive=positive)


def test_dropout_gradcheck_and_modes(f64, rng):
    x0 = rng.normal(size=(4, 6))
    d1, d2 = nn.Dropout(0.5, seed=7), nn.Dropout(0.5, seed=7)
    a, b = d1(Tensor(x0)).data, d2(Tensor(x0)).data
    np.testing.assert_array_equal(a, b)
    assert ((a == 0) | np.isclose(a, 2 * x0)).all()
    assert not np.array_equal(a, d1(Tensor(x0)).data)  # counter advanced
    d1.eval()
    np.testing.assert_array_equal(d1(Tensor(x0)).data, x0)
    rng_a = np.random.Generator(np.random.Philox(key=[3, 0]))
    x = Tensor(x0.copy(), requires_grad=True)
    T.dropout(x, 0.3, rng_a).sum().backward()
    keep = np.random.Generator(np.random.Philox(key=[3, 0])).random(x0.shape) >= 0.3
    np.testing.assert_allclose(x.grad, keep / 0.7)


def test_max_pool_tie_routes_to_first():
    x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    T.max_pool3d(x).sum().backward()
    expected = np.zeros((1, 2, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_conv_transpose_block_layout(f64, rng):
    x, w = rng.normal(size=(2, 2, 3, 2)), rng.normal(size=(2, 3, 2, 2, 2))
    out = T.conv_transpose3d(Tensor(x), Tensor(w)).data
    for o, d, h, ww in itertools.product(range(3), range(4), range(6), range(4)):
        ref = sum(x[c, d // 2, h // 2, ww // 2] * w[c, o, d % 2, h % 2, ww % 2] for c in range(2))
        assert out[o, d, h, ww] == pytest.approx(ref, abs=1e-12)


def test_determinism_bitwise(rng):
    x0 = rng.normal(size=(2, 6, 6, 6)).astype(np.float32)
    w0 = rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32)
    runs = []
    for _ in range(2):
        x, w = Tensor(x0.copy(), requires_grad=True), Tensor(w0.copy(), requires_grad=True)
        out = T.max_pool3d(T.relu(T.conv3d(x, w, padding=1)))
        out.sum().backward()
        runs.append((out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()))
    assert runs[0] == runs[1]


class TestCheckpoint:
    def test_roundtrip_bitexact(self, tmp_path, rng):
        state = {
            "encoder/level0/conv1/weight": rng.normal(size=(4, 1, 3, 3, 3)).astype(np.float32),
            "decoder/query": rng.normal(size=(16, 8)),
            "scalar": np.array(3.5),
            "ünïcode/名": np.arange(6, dtype=np.float64).reshape(2, 3),
        }
        checkpoint.save(tmp_path / "c.vxt", state)
        back = checkpoint.load(tmp_path / "c.vxt")
        assert list(back) == list(state)
        for k in state:
            assert back[k].dtype == state[k].dtype
            assert back[k].shape == state[k].shape
            assert back[k].tobytes() == state[k].tobytes()
        assert checkpoint.dumps(back) == checkpoint.dumps(state)

    def test_header_layout(self):
        buf = checkpoint.dumps({"ab": np.array([1.0], dtype=np.float32)})
        assert buf[:4] == b"VXT1"
        assert int.from_bytes(buf[4:12], "little") == 1
        assert int.from_bytes(buf[12:20], "little") == 2
        assert buf[20:22] == b"ab"
        assert int.from_bytes(buf[22:30], "little") == 1  # rank
        assert int.from_bytes(buf[30:38], "little") == 1  # extent
        assert buf[38] == 1  # float32 tag
        assert np.frombuffer(buf[39:43], "<f4")[0] == 1.0

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(b"NOPE")
