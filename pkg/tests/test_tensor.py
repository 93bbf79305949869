import numpy as np
import pytest

from wpal.tensor import (
    FormatError,
    ShapeError,
    Tensor,
    concat,
    load_tensor,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)

from conftest import fd_gradient, max_rel_err


class TestElementwise:
    def test_add(self):
        out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_identity(self, rng):
        x = rng.uniform(-2, 2, (3, 4))
        out = Tensor(x) * Tensor(np.ones_like(x))
        np.testing.assert_array_equal(out.data, x)

    def test_div_by_zero_yields_inf(self):
        out = Tensor([1.0]) / Tensor([0.0])
        assert np.isposinf(out.data[0])

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_scalar_broadcast(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) * 2.0
        np.testing.assert_array_equal(out.data, [[2.0, 4.0], [6.0, 8.0]])
        out = 1.0 - Tensor([0.25, 0.5])
        np.testing.assert_array_equal(out.data, [0.75, 0.5])

    def test_scalar_broadcast_gradient_sums(self):
        s = Tensor(np.array(3.0), requires_grad=True)
        x = Tensor(np.arange(4.0))
        (s * x).sum().backward()
        assert s.grad.reshape(()) == pytest.approx(0.0 + 1 + 2 + 3)

    def test_numpy_left_operand_defers_to_tensor(self):
        out = np.array([2.0, 3.0]) * Tensor([4.0, 5.0])
        assert isinstance(out, Tensor)
        np.testing.assert_array_equal(out.data, [8.0, 15.0])


class TestMatmul:
    def test_identity(self):
        v = Tensor([[1.0], [2.0], [3.0]])
        out = Tensor(np.eye(3)) @ v
        np.testing.assert_array_equal(out.data, v.data)

    def test_direct(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_inner_extent_mismatch(self):
        with pytest.raises(ShapeError, match="inner extents"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 2)))

    def test_backward_matches_finite_differences(self, rng):
        a = Tensor(rng.uniform(-2, 2, (4, 5)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, (5, 3)), requires_grad=True)
        proj = rng.uniform(0.5, 1.5, (4, 3))

        def loss():
            return ((a @ b) * proj).sum()

        loss().backward()
        ga, gb = a.grad.copy(), b.grad.copy()
        fa = fd_gradient(lambda: loss().item(), a.data)
        fb = fd_gradient(lambda: loss().item(), b.data)
        assert max_rel_err(ga, fa) < 1e-6
        assert max_rel_err(gb, fb) < 1e-6


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 5)))

    def test_quadratic_rule(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x * x).backward()

    def test_fanout_accumulates_both_contributions(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * 3.0).sum() + (x * x).sum()  # 3 + 2x per element
        y.backward()
        np.testing.assert_allclose(x.grad, [5.0, 7.0])

    def test_gradients_accumulate_across_backward_calls(self):
        x = Tensor([1.0], requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_allclose(x.grad, [2.0])
        x.zero_grad()
        assert x.grad is None

    def test_composite_graph_matches_finite_differences(self, rng):
        x = Tensor(rng.uniform(-2, 2, (4,)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (4,)), requires_grad=True)

        def loss():
            z = (x * w + x).clamp_min(1e-6)
            return (z.log() * z).sum()

        loss().backward()
        gx = x.grad.copy()
        fx = fd_gradient(lambda: loss().item(), x.data)
        assert max_rel_err(gx, fx) < 1e-5

    def test_concat_routes_gradient_slices(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0], requires_grad=True)
        (concat([a, b]) * np.array([1.0, 2.0, 3.0])).sum().backward()
        np.testing.assert_array_equal(a.grad, [1.0, 2.0])
        np.testing.assert_array_equal(b.grad, [3.0])

    def test_untracked_leaf_gets_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        frozen = Tensor([2.0])
        (x * frozen).sum().backward()
        assert frozen.grad is None


class TestInvariants:
    def test_grad_matches_data_length(self, rng):
        x = Tensor(rng.uniform(-2, 2, (2, 3, 4)), requires_grad=True)
        (x * x).sum().backward()
        assert x.grad.size == x.data.size

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(99)
            a = Tensor(rng.uniform(-2, 2, (8, 8)), requires_grad=True)
            b = Tensor(rng.uniform(-2, 2, (8, 8)), requires_grad=True)
            out = ((a @ b) * a).sum()
            out.backward()
            return out.item(), a.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert v1 == v2
        np.testing.assert_array_equal(g1, g2)

    def test_row_major_flat_layout(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(t.data.ravel(order="C"), [1.0, 2.0, 3.0, 4.0])
        assert t.data.flags.c_contiguous


class TestSerialization:
    def test_round_trip(self, rng, tmp_path):
        t = Tensor(rng.uniform(-5, 5, (2, 3, 4)))
        path = tmp_path / "t.tnsr"
        save_tensor(t, path)
        back = load_tensor(path)
        assert back.data.shape == (2, 3, 4)
        np.testing.assert_array_equal(back.data, t.data)

    def test_layout_is_little_endian_with_magic(self):
        blob = tensor_to_bytes(Tensor([1.0]))
        assert blob.startswith(b"WPAL-TNSR\0")
        assert blob[10:14] == (1).to_bytes(4, "little")
        assert blob[14:18] == (1).to_bytes(4, "little")

    def test_bad_magic_rejected(self):
        blob = tensor_to_bytes(Tensor([1.0]))
        with pytest.raises(FormatError, match="magic"):
            tensor_from_bytes(b"XXXX" + blob[4:])

    def test_truncation_rejected(self):
        blob = tensor_to_bytes(Tensor(np.arange(6.0).reshape(2, 3)))
        with pytest.raises(FormatError):
            tensor_from_bytes(blob[:-4])
