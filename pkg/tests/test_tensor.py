import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instcomp import tensor as T
from instcomp.tensor import Tensor


def rand(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def brute_conv3d(x, w, b, stride, pad):
    C, D, H, W = x.shape
    O, _, kd, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    Do = (D + 2 * pad - kd) // stride + 1
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((O, Do, Ho, Wo))
    for o in range(O):
        for i in range(Do):
            for j in range(Ho):
                for k in range(Wo):
                    patch = xp[:, i * stride : i * stride + kd, j * stride : j * stride + kh, k * stride : k * stride + kw]
                    out[o, i, j, k] = (patch * w[o]).sum() + b[o]
    return out


class TestConv3d:
    def test_identity_kernel(self, rng):
        x = rand(rng, 1, 3, 4, 5, grad=False)
        y = T.conv3d(x, Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x.data)

    def test_counting_kernel(self):
        y = T.conv3d(Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones((1, 1, 3, 3, 3))), Tensor(np.zeros(1)))
        assert y.shape == (1, 1, 1, 1)
        assert y.data.item() == 27.0

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (2, 0, 2), (1, 1, 1), (1, 3, 7)])
    def test_matches_brute_force(self, rng, stride, pad, k):
        x = rng.normal(size=(2, 7, 6, 8))
        w = rng.normal(size=(3, 2, k, k, k))
        b = rng.normal(size=3)
        y = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(y.data, brute_conv3d(x, w, b, stride, pad), atol=1e-11)

    def test_output_extents(self, rng):
        x = rand(rng, 2, 9, 8, 7, grad=False)
        y = T.conv3d(x, rand(rng, 4, 2, 3, 3, 3, grad=False), None, stride=2, padding=1)
        assert y.shape == (4, (9 + 2 - 3) // 2 + 1, (8 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self, rng):
        with pytest.raises(T.ShapeError, match="channels"):
            T.conv3d(rand(rng, 3, 4, 4, 4), rand(rng, 2, 2, 3, 3, 3), None)

    def test_kernel_must_fit(self, rng):
        with pytest.raises(T.ShapeError):
            T.conv3d(rand(rng, 1, 2, 2, 2), rand(rng, 1, 1, 3, 3, 3), None)

    def test_gradcheck(self, rng):
        x, w, b = rand(rng, 2, 6, 6, 6), rand(rng, 4, 2, 3, 3, 3), rand(rng, 4)
        assert T.gradcheck(lambda x, w, b: T.conv3d(x, w, b, 1, 1), [x, w, b]) < 1e-4

    def test_gradcheck_strided(self, rng):
        x, w, b = rand(rng, 2, 6, 6, 6), rand(rng, 3, 2, 2, 2, 2), rand(rng, 3)
        assert T.gradcheck(lambda x, w, b: T.conv3d(x, w, b, 2, 0), [x, w, b]) < 1e-4

    def test_fft_path_gradcheck(self, rng):
        # 9^3 kernels go through the FFT route
        x, w, b = rand(rng, 2, 5, 4, 6), rand(rng, 2, 2, 9, 9, 9), rand(rng, 2)
        assert T.gradcheck(lambda x, w, b: T.conv3d(x, w, b, 1, 4), [x, w, b], max_entries=60) < 1e-4

    def test_fft_matches_direct(self, rng):
        x = rng.normal(size=(3, 6, 5, 7))
        w = rng.normal(size=(2, 3, 7, 7, 7))
        b = rng.normal(size=2)
        y = T.conv3d(Tensor(x), Tensor(w), Tensor(b), 1, 3)
        np.testing.assert_allclose(y.data, brute_conv3d(x, w, b, 1, 3), atol=1e-10)


class TestConvTranspose3d:
    def test_identity_kernel(self, rng):
        x = rand(rng, 1, 3, 4, 5, grad=False)
        y = T.conv_transpose3d(x, Tensor(np.ones((1, 1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(y.data, x.data)

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 0, 2), (2, 1, 4)])
    def test_dense_matrix_transpose(self, rng, stride, pad, k):
        w = rng.normal(size=(2, 1, k, k, k))
        shape = (1, 4, 4, 4)
        n = int(np.prod(shape))
        cols = []
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            cols.append(T.conv3d(Tensor(e.reshape(shape)), Tensor(w), None, stride, pad).data.reshape(-1))
        M = np.stack(cols, axis=1)
        out_shape = T.conv3d(Tensor(np.zeros(shape)), Tensor(w), None, stride, pad).shape
        y = rng.normal(size=out_shape)
        got = T.conv_transpose3d(Tensor(y), Tensor(w), None, stride, pad)
        assert got.shape == shape
        np.testing.assert_allclose(got.data.reshape(-1), M.T @ y.reshape(-1), atol=1e-12)

    def test_output_extents(self, rng):
        y = T.conv_transpose3d(rand(rng, 3, 4, 2, 5, grad=False), rand(rng, 3, 2, 2, 2, 2, grad=False), None, 2, 0)
        assert y.shape == (2, 8, 4, 10)

    def test_channel_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            T.conv_transpose3d(rand(rng, 3, 2, 2, 2), rand(rng, 2, 2, 2, 2, 2), None, 2)

    def test_gradcheck(self, rng):
        x, w, b = rand(rng, 3, 3, 3, 3), rand(rng, 3, 2, 2, 2, 2), rand(rng, 2)
        assert T.gradcheck(lambda x, w, b: T.conv_transpose3d(x, w, b, 2, 0), [x, w, b]) < 1e-4

    def test_gradcheck_overlapping(self, rng):
        x, w, b = rand(rng, 2, 3, 3, 3), rand(rng, 2, 2, 3, 3, 3), rand(rng, 2)
        assert T.gradcheck(lambda x, w, b: T.conv_transpose3d(x, w, b, 2, 1), [x, w, b]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    stride=st.integers(1, 2),
    pad=st.integers(0, 1),
    k=st.integers(1, 3),
    extent=st.integers(3, 5),
)
def test_convolution_adjoint_property(seed, stride, pad, k, extent):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, extent, extent + 1, extent))
    w = rng.normal(size=(3, 2, k, k, k))
    cx = T.conv3d(Tensor(x), Tensor(w), None, stride, pad)
    y = rng.normal(size=cx.shape)
    cty = T.conv_transpose3d(Tensor(y), Tensor(w), None, stride, pad)
    if cty.shape != x.shape:
        # strided conv drops trailing rows; compare on the overlapping lattice
        x = x[:, : cty.shape[1], : cty.shape[2], : cty.shape[3]]
        cx = T.conv3d(Tensor(x), Tensor(w), None, stride, pad)
    lhs = float((cx.data * y).sum())
    rhs = float((x * cty.data).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rand(rng, 2, 4, 5, grad=False)
        w = np.zeros((2, 2, 1, 1))
        w[0, 0] = w[1, 1] = 1.0
        np.testing.assert_array_equal(T.conv2d(x, Tensor(w), Tensor(np.zeros(2))).data, x.data)

    def test_counting_kernel(self):
        y = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert y.data.item() == 9.0

    def test_gradcheck(self, rng):
        x, w, b = rand(rng, 3, 8, 6), rand(rng, 4, 3, 4, 4), rand(rng, 4)
        assert T.gradcheck(lambda x, w, b: T.conv2d(x, w, b, 2, 1), [x, w, b]) < 1e-4

    def test_channel_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            T.conv2d(rand(rng, 3, 4, 4), rand(rng, 1, 2, 3, 3), None)


class TestInstanceNorm:
    def test_constant_channel(self):
        y = T.instance_norm(Tensor(np.full((2, 3, 3, 3), 4.2)))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_symmetric_pair(self):
        y = T.instance_norm(Tensor(np.array([[-1.0, 1.0]])), eps=1e-14)
        np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-12)

    def test_gradcheck(self, rng):
        x = rand(rng, 2, 3, 3, 3)
        assert T.gradcheck(T.instance_norm, [x]) < 1e-4

    def test_rejects_channel_only(self):
        with pytest.raises(T.ShapeError):
            T.instance_norm(Tensor(np.ones(3)))


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-2.0, 0.0, 3.0])).data, [0.0, 0.0, 3.0])

    def test_relu_derivative_at_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        T.backward(T.tsum(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        s = T.sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0

    @pytest.mark.parametrize("kind", ["relu", "sigmoid"])
    def test_gradcheck(self, rng, kind):
        x = rand(rng, 4, 5)
        assert T.gradcheck(lambda x: T.elementwise(x, kind), [x]) < 1e-4


class TestLinear:
    def test_identity(self, rng):
        x = rand(rng, 5, grad=False)
        np.testing.assert_array_equal(T.linear(x, Tensor(np.eye(5)), Tensor(np.zeros(5))).data, x.data)

    def test_zero_weight(self, rng):
        b = rng.normal(size=3)
        np.testing.assert_array_equal(T.linear(rand(rng, 4), Tensor(np.zeros((3, 4))), Tensor(b)).data, b)

    def test_shape_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            T.linear(rand(rng, 4), rand(rng, 3, 5), None)

    def test_gradcheck(self, rng):
        assert T.gradcheck(T.linear, [rand(rng, 6), rand(rng, 3, 6), rand(rng, 3)]) < 1e-4


class TestConcat:
    def test_channels_and_order(self, rng):
        a, b = rand(rng, 2, 1, 1, 1), rand(rng, 3, 1, 1, 1)
        c = T.concat_channels(a, b)
        assert c.shape == (5, 1, 1, 1)
        np.testing.assert_array_equal(c.data[:2], a.data)
        np.testing.assert_array_equal(c.data[2:], b.data)

    def test_spatial_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            T.concat_channels(rand(rng, 1, 2, 2, 2), rand(rng, 1, 2, 2, 3))

    def test_gradcheck(self, rng):
        assert T.gradcheck(T.concat_channels, [rand(rng, 2, 2, 3, 2), rand(rng, 3, 2, 3, 2)]) < 1e-4


class TestLosses:
    def test_bce_log2(self):
        v = T.loss_bce_with_logits(Tensor([0.0]), [0.5]).data.item()
        assert abs(v - math.log(2.0)) <= 1e-12

    def test_bce_saturated(self):
        assert T.loss_bce_with_logits(Tensor([20.0]), [1.0]).data.item() < 1e-8

    def test_bce_rejects_bad_target(self):
        with pytest.raises(ValueError):
            T.loss_bce_with_logits(Tensor([0.0]), [1.5])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20), st.floats(0, 1))
    def test_bce_finite(self, logits, t):
        v = T.loss_bce_with_logits(Tensor(logits), np.full(len(logits), t)).data.item()
        assert math.isfinite(v)

    def test_bce_gradcheck(self, rng):
        t = rng.uniform(0, 1, (3, 4))
        assert T.gradcheck(lambda x: T.loss_bce_with_logits(x, t), [rand(rng, 3, 4)]) < 1e-4

    def test_ce_uniform(self):
        v = T.loss_cross_entropy(Tensor(np.zeros(8)), 3).data.item()
        assert abs(v - math.log(8.0)) <= 1e-12

    def test_ce_confident(self):
        x = np.zeros(8)
        x[2] = 20.0
        # exact value is log(1 + 7 e^-20)
        assert T.loss_cross_entropy(Tensor(x), 2).data.item() == pytest.approx(np.log1p(7 * np.exp(-20.0)), rel=1e-9)

    def test_ce_label_range(self):
        with pytest.raises(ValueError):
            T.loss_cross_entropy(Tensor(np.zeros(4)), 4)

    def test_ce_gradcheck(self, rng):
        assert T.gradcheck(lambda x: T.loss_cross_entropy(x, 1), [rand(rng, 5)]) < 1e-4

    def test_huber_branches(self):
        assert T.loss_huber(Tensor([0.0]), [0.0]).data.item() == 0.0
        # both branch formulas at the switch point
        assert 0.5 * 2.0**2 == abs(2.0) == T.loss_huber(Tensor([2.0]), [0.0]).data.item()
        assert T.loss_huber(Tensor([-5.0]), [0.0]).data.item() == 5.0

    def test_huber_continuity(self):
        eps = 1e-9
        lo = T.loss_huber(Tensor([2.0 - eps]), [0.0]).data.item()
        hi = T.loss_huber(Tensor([2.0 + eps]), [0.0]).data.item()
        assert abs(lo - hi) < 1e-8

    def test_huber_gradcheck(self, rng):
        pred = Tensor(rng.uniform(-4, 4, 10), requires_grad=True)
        pred.data[np.abs(np.abs(pred.data) - 2.0) < 0.01] += 0.1
        assert T.gradcheck(lambda p: T.loss_huber(p, np.zeros(10)), [pred]) < 1e-4


class TestBackward:
    def test_sum(self, rng):
        x = rand(rng, 3, 2)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.tsum(x))
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(T.ShapeError):
            T.backward(rand(rng, 3) * 2.0)

    def test_no_grad_leaf_untouched(self, rng):
        x = rand(rng, 3)
        c = rand(rng, 3, grad=False)
        T.backward(T.tsum(T.mul(x, c)))
        assert c.grad is None

    def test_tape_order(self, rng):
        x = rand(rng, 2, 3, 3, 3)
        y = T.relu(T.instance_norm(x))
        z = T.tsum(T.add(y, y))
        tape = T.Tape.of(z)
        assert tape.kinds() == ["instance_norm", "relu", "add", "sum"]
        seqs = [n.seq for n in tape.nodes]
        assert seqs == sorted(seqs)
        for i, node in enumerate(tape.nodes):
            for inp in node.inputs:
                if inp.node is not None:
                    assert tape.nodes.index(inp.node) < i

    def test_shared_subexpression(self, rng):
        x = rand(rng, 4)
        y = T.sigmoid(x)
        loss = T.tsum(T.add(T.mul(y, y), y))
        assert T.gradcheck(lambda x: T.tsum(T.add(T.mul(T.sigmoid(x), T.sigmoid(x)), T.sigmoid(x))), [x]) < 1e-4
        del loss

    def test_no_grad_records_nothing(self, rng):
        x = rand(rng, 3)
        with T.no_grad():
            y = T.relu(x)
        assert y.node is None and not y.requires_grad

    def test_deterministic_forward(self, rng):
        x = rng.normal(size=(2, 6, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        a = T.conv3d(Tensor(x), Tensor(w), None, 1, 1).data
        b = T.conv3d(Tensor(x), Tensor(w), None, 1, 1).data
        assert a.tobytes() == b.tobytes()


class TestStructuralOps:
    def test_crop_gradcheck(self, rng):
        assert T.gradcheck(lambda x: T.crop(x, (1, 0, 2), (3, 2, 4)), [rand(rng, 2, 4, 3, 5)]) < 1e-4

    def test_take_gradcheck(self, rng):
        assert T.gradcheck(lambda x: T.take(x, [0, 5, 5, 11]), [rand(rng, 3, 4)]) < 1e-4

    def test_pad_edge_matches_numpy(self, rng):
        x = rand(rng, 2, 3, 1, 4, grad=False)
        want = np.pad(x.data, ((0, 0), (2, 2), (2, 2), (2, 2)), mode="edge")
        np.testing.assert_array_equal(T.pad_edge(x, 2).data, want)

    def test_pad_edge_gradcheck(self, rng):
        assert T.gradcheck(lambda x: T.pad_edge(x, 2), [rand(rng, 2, 3, 1, 4)]) < 1e-4

    def test_roi_pool_identity_on_4cube(self, rng):
        x = rand(rng, 3, 6, 7, 8, grad=False)
        y = T.roi_max_pool3d(x, (1, 2, 3), (5, 6, 7))
        np.testing.assert_array_equal(y.data, x.data[:, 1:5, 2:6, 3:7])

    def test_roi_bins_nonempty(self):
        for length in range(1, 20):
            bins = T.roi_bins(3, 3 + length, 4)
            assert bins[0][0] == 3 and bins[-1][1] == 3 + length
            assert all(b > a for a, b in bins)

    def test_roi_pool_gradcheck(self, rng):
        x = rand(rng, 2, 7, 5, 6)
        assert T.gradcheck(lambda x: T.roi_max_pool3d(x, (0, 1, 1), (7, 4, 6)), [x]) < 1e-4


class TestSgd:
    def test_single_step(self):
        p = T.parameter([1.0])
        p.grad = np.array([2.0])
        T.sgd_step({"p": p}, 0.1)
        assert p.data[0] == pytest.approx(0.8)
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_zero_lr(self):
        p = T.parameter([1.5, -2.0])
        p.grad = np.array([3.0, 4.0])
        T.sgd_step([p], 0.0)
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_two_steps_equal_summed_displacement(self):
        g = np.array([0.3, -1.2])
        p = T.parameter([1.0, 2.0])
        for _ in range(2):
            p.grad = g.copy()
            T.sgd_step([p], 0.05)
        np.testing.assert_allclose(p.data, np.array([1.0, 2.0]) - 2 * 0.05 * g, atol=1e-15)

    def test_missing_grad(self):
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError, match="gradient"):
            T.sgd_step({"w": p}, 0.1)


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.weight": T.parameter(rng.normal(size=(2, 3, 1, 1, 1))), "b": T.parameter(rng.normal(size=4))}
    path = tmp_path / "m.rvnt"
    T.save_checkpoint(path, params, {"note": "x"})
    raw = path.read_bytes()
    assert raw[:4] == b"RVNT"
    loaded, header = T.load_checkpoint(path)
    assert header == {"note": "x"}
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].tobytes() == params[k].data.tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.rvnt"
    path.write_bytes(b"XXXX" + b"\0" * 16)
    with pytest.raises(ValueError):
        T.load_checkpoint(path)
