import numpy as np
import pytest

from dlab.exceptions import GraphError, ShapeError, UnknownPrimitiveError
from dlab.optim import AdamState, adam_step
from dlab.tensor import PRIMITIVES, Graph, Tensor, apply, backward, forward, grad_check, no_grad


class TestForward:
    def test_matmul_identity(self, rng):
        a = rng.normal(size=(3, 3))
        out = apply("matmul", np.eye(3), a)
        np.testing.assert_array_equal(out.data, a)

    def test_relu(self):
        np.testing.assert_array_equal(apply("relu", [-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(apply("softmax", [0.0, 0.0]).data, [0.5, 0.5])

    def test_softmax_handles_huge_logits(self):
        out = apply("softmax", [1000.0, 0.0, -1e30]).data
        assert np.isfinite(out).all()
        assert out[0] == 1.0 and out[2] == 0.0

    def test_shape_mismatch_names_primitive(self):
        with pytest.raises(ShapeError, match="matmul"):
            apply("matmul", np.ones((2, 3)), np.ones((2, 3)))

    def test_broadcast_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            apply("add", np.ones((2, 3)), np.ones(4))

    def test_graph_forward_is_pure(self, rng):
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        graph = Graph(lambda x: apply("relu", apply("matmul", x, w)))
        x = rng.normal(size=(5, 4))
        first = forward(graph, {"x": x})["out"].data.copy()
        second = forward(graph, {"x": x})["out"].data
        assert first.tobytes() == second.tobytes()
        assert len(graph) == 2

    def test_item_of_scalar(self):
        assert Tensor([[2.5]]).item() == 2.5

    def test_item_of_vector(self):
        with pytest.raises(ShapeError, match="item"):
            Tensor([1.0, 2.0]).item()


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        backward(apply("sum", x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_product_rule(self):
        x = Tensor(2.0, requires_grad=True)
        y = Tensor(3.0, requires_grad=True)
        grads = backward(x * y)
        assert grads[x] == pytest.approx(3.0)
        assert y.grad == pytest.approx(2.0)

    def test_repeated_use_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x + x)
        assert x.grad == pytest.approx(7.0)

    def test_relu_matmul_against_finite_differences(self, rng):
        x = rng.normal(size=(4, 3))
        w0 = rng.normal(size=(3, 5))

        def loss(w):
            return np.maximum(x @ w, 0).sum()

        w = Tensor(w0, requires_grad=True)
        backward(apply("sum", apply("relu", apply("matmul", x, w))))
        h = 1e-5
        numeric = np.zeros_like(w0)
        for idx in np.ndindex(w0.shape):
            up, down = w0.copy(), w0.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = (loss(up) - loss(down)) / (2 * h)
        err = np.abs(w.grad - numeric) / np.maximum(1.0, np.abs(numeric))
        assert err.max() < 1e-4

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(GraphError):
            backward(apply("relu", x))

    def test_backward_over_recorded_graph(self, rng):
        w = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        graph = Graph(lambda x: apply("sum", apply("matmul", x, w)))
        out = forward(graph, {"x": np.ones((1, 2))})["out"]
        grads = backward(out, graph)
        np.testing.assert_array_equal(grads[w], np.ones((2, 2)))

    def test_no_grad_records_nothing(self):
        x = Tensor(1.0, requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y.node is None and not y.requires_grad


class TestGradCheck:
    def test_softmax(self):
        assert grad_check("softmax", [[8]], trials=10, h=1e-5) < 1e-4

    def test_conv2d(self):
        assert grad_check("conv2d", [[1, 1, 8, 8], [4, 1, 3, 3]], trials=3, h=1e-5) < 1e-4

    def test_add_is_exact(self):
        assert grad_check("add", [[4], [4]], trials=1, h=1e-5) < 1e-7

    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_every_primitive(self, name):
        assert grad_check(name, trials=10, rng=np.random.default_rng(1)) < 1e-4

    def test_strided_padded_conv(self):
        assert grad_check("conv2d", [[2, 2, 6, 6], [3, 2, 4, 4]], trials=2, stride=2, padding=1) < 1e-4

    def test_unknown_primitive(self):
        with pytest.raises(UnknownPrimitiveError):
            grad_check("tanh", [[3]])


class TestConvShapes:
    def test_conv_encoder_halves(self):
        x = np.zeros((1, 3, 64, 64))
        out = apply("conv2d", x, np.zeros((32, 3, 4, 4)), stride=2, padding=1)
        assert out.shape == (1, 32, 32, 32)

    def test_transpose_doubles(self):
        x = np.zeros((1, 64, 4, 4))
        out = apply("conv_transpose2d", x, np.zeros((64, 32, 4, 4)), stride=2, padding=1)
        assert out.shape == (1, 32, 8, 8)


class TestAdam:
    def test_zero_gradient_is_identity(self, rng):
        p = {"w": Tensor(rng.normal(size=(3, 2)))}
        before = p["w"].data.copy()
        state = AdamState()
        for _ in range(3):
            adam_step(p, {"w": np.zeros((3, 2))}, state)
        np.testing.assert_array_equal(p["w"].data, before)
        assert state.step == 3

    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor(1.0)}
        adam_step(p, {"w": np.array(1.0)}, AdamState(lr=0.1))
        assert float(p["w"].data) == pytest.approx(0.9, abs=1e-6)

    def test_identical_params_stay_identical(self):
        p = {"a": Tensor([0.5, -0.2]), "b": Tensor([0.5, -0.2])}
        state = AdamState(lr=0.01)
        for g in ([1.0, 2.0], [-0.5, 0.3]):
            adam_step(p, {"a": np.array(g), "b": np.array(g)}, state)
        np.testing.assert_array_equal(p["a"].data, p["b"].data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": Tensor(np.zeros(2))}, {"w": np.ones(3)}, AdamState())
