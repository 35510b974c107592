"""Autodiff engine: op semantics, gradient oracles, graph contract, file format."""

import numpy as np
import pytest

from fedcvgl import tensor as T
from fedcvgl.tensor import ShapeError, SingularSystem, Tensor

from conftest import gradcheck, numerical_gradient


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------


class TestConv2d:
    def test_sum_of_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = T.conv2d(x, k, b, stride=1, padding=0)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == pytest.approx(9.0)

    def test_identity_kernel(self):
        x = Tensor(rng(1).normal(size=(2, 3, 5, 5)).astype(np.float32))
        k = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            k[c, c, 0, 0] = 1.0
        out = T.conv2d(x, Tensor(k), Tensor(np.zeros(3)), stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_shape_arithmetic(self):
        x = Tensor(np.zeros((1, 3, 8, 8)))
        k = Tensor(np.zeros((4, 3, 3, 3)))
        b = Tensor(np.zeros(4))
        assert T.conv2d(x, k, b, stride=2, padding=1).shape == (1, 4, 4, 4)
        assert T.conv2d(x, k, b, stride=1, padding=1).shape == (1, 4, 8, 8)

    def test_channel_mismatch_names_dims(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        k = Tensor(np.zeros((4, 3, 3, 3)))
        with pytest.raises(ShapeError, match=r"channels 2.*Cin 3"):
            T.conv2d(x, k, Tensor(np.zeros(4)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


class TestGridSample:
    def test_identity_on_integer_grid(self):
        m = Tensor(rng(2).normal(size=(3, 4, 5)).astype(np.float32))
        vv, uu = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
        coords = Tensor(np.stack([uu, vv]).astype(np.float32))
        out, valid = T.grid_sample_bilinear(m, coords)
        np.testing.assert_allclose(out.data, m.data, atol=1e-6)
        assert valid.all()

    def test_bilinear_midpoint(self):
        m = Tensor(np.array([[[0.0, 1.0]]]))
        coords = Tensor(np.array([[[0.5]], [[0.0]]]))
        out, valid = T.grid_sample_bilinear(m, coords)
        assert out.item() == pytest.approx(0.5)
        assert valid.all()

    def test_out_of_bounds_zero_invalid(self):
        m = Tensor(np.ones((1, 3, 3)))
        coords = Tensor(np.array([[[-0.5, 1.0]], [[1.0, 3.5]]]))
        out, valid = T.grid_sample_bilinear(m, coords)
        assert not valid.any()
        np.testing.assert_array_equal(out.data, 0.0)

    def test_coord_gradient_midpoint(self, f64_mode):
        m = Tensor(np.array([[[0.0, 1.0]]]))
        coords = Tensor(np.array([[[0.5]], [[0.0]]]), requires_grad=True)
        out, _ = T.grid_sample_bilinear(m, coords)
        T.backward(T.tsum(out))
        assert coords.grad[0, 0, 0] == pytest.approx(1.0)


class TestSpatialGradient:
    def test_ramp(self):
        u = np.tile(np.arange(6, dtype=np.float32), (5, 1))
        du, dv = T.spatial_gradient(Tensor(u[None]))
        np.testing.assert_allclose(du.data, 1.0, atol=1e-6)
        np.testing.assert_allclose(dv.data, 0.0, atol=1e-6)

    def test_constant(self):
        du, dv = T.spatial_gradient(Tensor(np.full((2, 4, 4), 3.25)))
        np.testing.assert_array_equal(du.data, 0.0)
        np.testing.assert_array_equal(dv.data, 0.0)

    def test_against_per_pixel_oracle(self):
        m = rng(3).normal(size=(1, 5, 5)).astype(np.float64)
        du, dv = T.spatial_gradient(Tensor(m))
        # independent brute-force central/one-sided difference table
        h, w = 5, 5
        exp_u = np.zeros((h, w))
        exp_v = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                if 0 < j < w - 1:
                    exp_u[i, j] = (m[0, i, j + 1] - m[0, i, j - 1]) / 2
                elif j == 0:
                    exp_u[i, j] = m[0, i, 1] - m[0, i, 0]
                else:
                    exp_u[i, j] = m[0, i, -1] - m[0, i, -2]
                if 0 < i < h - 1:
                    exp_v[i, j] = (m[0, i + 1, j] - m[0, i - 1, j]) / 2
                elif i == 0:
                    exp_v[i, j] = m[0, 1, j] - m[0, 0, j]
                else:
                    exp_v[i, j] = m[0, -1, j] - m[0, -2, j]
        np.testing.assert_allclose(du.data[0], exp_u, atol=1e-6)
        np.testing.assert_allclose(dv.data[0], exp_v, atol=1e-6)

    def test_too_small_rejected(self):
        with pytest.raises(ShapeError):
            T.spatial_gradient(Tensor(np.zeros((1, 1, 5))))


def _sym3(afree):
    """(A + A^T)/2 built from differentiable scalar ops (keeps FD perturbations
    of single entries inside solve3's symmetric-input contract)."""
    e = [T.gather_scalar(afree, i) for i in range(9)]
    avg = lambda i, j: T.scalar_mul(T.add(e[i], e[j]), 0.5)
    entries = [e[0], avg(1, 3), avg(2, 6), avg(3, 1), e[4], avg(5, 7), avg(6, 2), avg(7, 5), e[8]]
    return T.stack_scalars(entries, (3, 3))


def gaussian_elimination(a, b):
    """Independent 3x3 solver: partial-pivot elimination, float64."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = 3
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row] -= f * a[col]
            b[row] -= f * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


class TestSolve3:
    def test_identity(self):
        x = T.solve3(Tensor(np.eye(3)), Tensor(np.array([1.0, 2.0, 3.0])))
        np.testing.assert_allclose(x.data, [1.0, 2.0, 3.0], atol=1e-6)

    def test_diagonal(self):
        x = T.solve3(Tensor(np.diag([2.0, 4.0, 8.0])), Tensor(np.array([2.0, 4.0, 8.0])))
        np.testing.assert_allclose(x.data, [1.0, 1.0, 1.0], atol=1e-6)

    def test_random_spd_vs_elimination_oracle(self, f64_mode):
        g = rng(4)
        for _ in range(50):
            m = g.normal(size=(3, 3))
            a = m.T @ m + np.eye(3)
            b = g.normal(size=3)
            x = T.solve3(Tensor(a), Tensor(b))
            np.testing.assert_allclose(x.data, gaussian_elimination(a, b), atol=1e-6, rtol=1e-6)

    def test_singular_raises(self):
        with pytest.raises(SingularSystem):
            T.solve3(Tensor(np.zeros((3, 3))), Tensor(np.ones(3)))

    def test_near_singular_regularized(self, f64_mode):
        # rank-2 SPD: the Tikhonov floor makes it solvable
        a = np.diag([1.0, 1.0, 0.0])
        x = T.solve3(Tensor(a), Tensor(np.array([1.0, 1.0, 0.0])))
        assert np.all(np.isfinite(x.data))
        np.testing.assert_allclose(x.data[:2], [1.0, 1.0], rtol=1e-4)

    def test_asymmetric_rejected(self):
        a = np.eye(3)
        a[0, 1] = 0.5
        with pytest.raises(ShapeError, match="symmetric"):
            T.solve3(Tensor(a), Tensor(np.ones(3)))

    def test_gradient_flows(self, f64_mode):
        g = rng(5)
        m = g.normal(size=(3, 3))
        a = m.T @ m + np.eye(3)
        b = g.normal(size=3)
        gradcheck(lambda at, bt: T.tsum(T.solve3(_sym3(at), bt)), [a, b], rtol=1e-6)


class TestElementwise:
    def test_relu_values(self):
        out = T.relu(Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_mean_masked_all_false(self):
        out = T.mean_masked(Tensor(np.ones((2, 3, 3))), np.zeros((3, 3), dtype=bool))
        assert out.item() == 0.0

    def test_mean_masked_value(self):
        m = np.zeros((2, 2), dtype=bool)
        m[0, 0] = True
        x = np.array([[[4.0, 0.0], [0.0, 0.0]], [[2.0, 0.0], [0.0, 0.0]]])
        assert T.mean_masked(Tensor(x), m).item() == pytest.approx(3.0)

    def test_sum_gradient_ones(self):
        x = Tensor(rng(6).normal(size=(2, 3)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=x.data.dtype))

    def test_div_by_zero_guarded(self):
        with pytest.raises(ZeroDivisionError):
            T.div(Tensor(np.ones(3)), Tensor(np.array([1.0, 0.0, 2.0])))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            T.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_upsample2x(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        out = T.upsample2x_nearest(x)
        np.testing.assert_array_equal(
            out.data[0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        )

    def test_concat_channels(self):
        a = Tensor(np.ones((2, 3, 3)))
        b = Tensor(np.zeros((1, 3, 3)))
        out = T.concat_channels([a, b])
        assert out.shape == (3, 3, 3)

    def test_wrap_angle(self):
        x = Tensor(np.array([3.5 * np.pi, -2.5 * np.pi, 0.25]))
        out = T.wrap_angle(x)
        np.testing.assert_allclose(out.data, [-0.5 * np.pi, -0.5 * np.pi, 0.25], atol=1e-6)


class TestBackwardContract:
    def test_sum_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_quadratic_grad(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(T.add(x, x))

    def test_repeated_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.tsum(x)
        T.backward(loss)
        with pytest.raises(RuntimeError, match="already ran"):
            T.backward(loss)

    def test_grad_accumulates_over_fanout(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        T.backward(T.tsum(T.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_linearity_of_add(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        T.backward(T.tsum(T.add(a, b)))
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_scalar_mul_scales_grads_exactly(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.tsum(T.scalar_mul(a, 2.5)))
        np.testing.assert_array_equal(a.grad, [2.5, 2.5])

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.tsum(x)
        assert not y.requires_grad
        assert y._parents == ()

    def test_graph_topological_order(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.mul(x, x)
        z = T.tsum(T.add(y, x))
        graph = T.Graph(z)
        pos = {id(n): i for i, n in enumerate(graph.nodes)}
        for node in graph.nodes:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]


class TestDeterminism:
    def test_bit_identical_runs(self):
        def run():
            g = rng(42)
            x = Tensor(g.normal(size=(1, 2, 6, 6)).astype(np.float32), requires_grad=True)
            k = Tensor(g.normal(size=(3, 2, 3, 3)).astype(np.float32), requires_grad=True)
            b = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
            out = T.relu(T.conv2d(x, k, b, stride=1, padding=1))
            loss = T.tsum(out)
            T.backward(loss)
            return out.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

        assert run() == run()


# ---------------------------------------------------------------------------
# gradient oracle suite: every op vs central finite differences
# ---------------------------------------------------------------------------


def _op_cases():
    g = rng(7)
    x34 = g.normal(size=(3, 4))
    y34 = g.normal(size=(3, 4))
    m244 = g.normal(size=(2, 4, 4))
    mask = g.random(size=(4, 4)) > 0.4
    img = g.normal(size=(1, 2, 6, 6))
    ker = g.normal(size=(3, 2, 3, 3))
    bias = g.normal(size=3)
    fmap = g.normal(size=(2, 5, 6))
    coords = np.stack(
        [g.uniform(0.3, 4.4, size=(3, 3)), g.uniform(0.3, 3.4, size=(3, 3))]
    )
    spd = g.normal(size=(3, 3))
    spd = spd.T @ spd + np.eye(3)
    cases = [
        ("add", lambda a, b: T.tsum(T.add(a, b)), [x34, y34]),
        ("sub", lambda a, b: T.tsum(T.mul(T.sub(a, b), T.sub(a, b))), [x34, y34]),
        ("mul", lambda a, b: T.tsum(T.mul(a, b)), [x34, y34]),
        ("div", lambda a, b: T.tsum(T.div(a, b)), [x34, np.abs(y34) + 1.0]),
        ("neg", lambda a: T.tsum(T.mul(T.neg(a), a)), [x34]),
        ("relu", lambda a: T.tsum(T.relu(a)), [x34 + 0.05]),
        ("scalar_mul", lambda a: T.tsum(T.scalar_mul(T.mul(a, a), -1.7)), [x34]),
        ("cos", lambda a: T.tsum(T.cos(a)), [x34]),
        ("sin", lambda a: T.tsum(T.sin(a)), [x34]),
        ("sqrt", lambda a: T.tsum(T.sqrt(a)), [np.abs(x34) + 0.5]),
        ("abs", lambda a: T.tsum(T.absval(a)), [x34 + 0.03]),
        ("wrap_angle", lambda a: T.tsum(T.mul(T.wrap_angle(a), T.wrap_angle(a))), [x34 * 2.0]),
        ("sum", lambda a: T.tsum(a), [m244]),
        ("mean_masked", lambda a: T.mean_masked(a, mask), [m244 + 0.2]),
        ("masked_dot", lambda a, b: T.masked_dot(a, b, mask), [m244, g.normal(size=(2, 4, 4))]),
        ("concat", lambda a, b: T.tsum(T.mul(c := T.concat_channels([a, b]), c)), [m244, g.normal(size=(1, 4, 4))]),
        ("upsample2x", lambda a: T.tsum(T.mul(u := T.upsample2x_nearest(a), u)), [m244]),
        ("conv2d", lambda x, k, b: T.tsum(T.conv2d(x, k, b, stride=1, padding=1)), [img, ker, bias]),
        ("conv2d_s2", lambda x, k, b: T.tsum(T.mul(o := T.conv2d(x, k, b, stride=2, padding=1), o)), [img, ker, bias]),
        ("grid_sample", lambda m, c: T.tsum(T.grid_sample_bilinear(m, c)[0]), [fmap, coords]),
        ("spatial_gradient", lambda m: T.tsum(T.mul(*T.spatial_gradient(m))), [fmap]),
        ("gather", lambda a: T.mul(T.gather_scalar(a, 5), T.gather_scalar(a, 2)), [x34]),
        ("stack_scalars", lambda a: T.tsum(T.stack_scalars([T.gather_scalar(a, i) for i in range(4)], (2, 2))), [x34]),
        ("sum_scalars", lambda a: T.sum_scalars([T.mul(s := T.gather_scalar(a, i), s) for i in range(5)]), [x34]),
        ("scale", lambda a, s: T.tsum(T.scale(a, s)), [m244, np.array(1.3)]),
        ("adds", lambda a, s: T.tsum(T.mul(o := T.adds(a, s), o)), [m244, np.array(0.7)]),
        ("apply_mask", lambda a: T.tsum(T.apply_mask(a, mask)), [m244 + 0.1]),
        ("select_channel", lambda a: T.tsum(T.mul(c := T.select_channel(a, 1), c)), [m244]),
        ("bmul", lambda a, b: T.tsum(T.bmul(a, b)), [m244, g.normal(size=(4, 4))]),
        ("select_batch", lambda a: T.tsum(T.select_batch(a, 0)), [img]),
        ("stack_batch", lambda a, b: T.tsum(T.stack_batch([a, b])), [m244, g.normal(size=(2, 4, 4))]),
        ("solve3", lambda a, b: T.tsum(T.solve3(_sym3(a), b)), [spd, g.normal(size=3)]),
    ]
    return cases


@pytest.mark.parametrize("name,build,arrays", _op_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_gradcheck_f32(name, build, arrays):
    """Per-op gradient vs finite differences, f32 storage, h = 1e-3."""
    arrays32 = [np.asarray(a, dtype=np.float32) for a in arrays]
    gradcheck(build, arrays32, h=1e-3, rtol=1e-3)


@pytest.mark.parametrize("name,build,arrays", _op_cases(), ids=lambda c: c if isinstance(c, str) else "")
def test_gradcheck_f64(name, build, arrays, f64_mode):
    """Per-op gradient vs finite differences, f64 mode, tighter tolerance."""
    gradcheck(build, arrays, h=1e-3, rtol=1e-6)


# ---------------------------------------------------------------------------
# tensor file format
# ---------------------------------------------------------------------------


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        arr = rng(8).normal(size=(2, 3, 4, 5)).astype(np.float32)
        p = tmp_path / "t.cvgt"
        T.save_tensor(p, arr)
        back = T.load_tensor(p)
        assert back.dtype == np.float32
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()
        # write -> read -> write is byte-identical
        assert T.tensor_to_bytes(back) == T.tensor_to_bytes(arr)

    def test_header_layout(self):
        buf = T.tensor_to_bytes(np.zeros((2, 3), dtype=np.float32))
        assert buf[:4] == b"CVGT"
        assert buf[4] == 1  # version
        assert buf[5] == 1  # dtype f32
        assert int.from_bytes(buf[6:8], "little") == 2
        assert int.from_bytes(buf[8:12], "little") == 2
        assert int.from_bytes(buf[12:16], "little") == 3
        assert len(buf) == T.header_nbytes(2) + 4 * 6

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            T.tensor_from_bytes(b"NOPE" + bytes(20))

    def test_scalar_round_trip(self):
        buf = T.tensor_to_bytes(np.float32(3.5))
        assert T.tensor_from_bytes(buf).shape == ()
        assert T.tensor_from_bytes(buf) == np.float32(3.5)
