"""Engine tests: forward values, invariants, error contracts, and
finite-difference verification of every primitive."""

import numpy as np
import pytest

from pointmpm import autodiff as ad


def expr_of(fn, names):
    return ad.Expression(fn, names)


class TestForwardValues:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_l2_normalize_analytic(self):
        out = ad.l2_normalize(ad.Tensor([3.0, 4.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-7)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 3))
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x))
        np.testing.assert_allclose(out.data, x, atol=1e-7)

    def test_evaluate_deterministic_bitwise(self):
        rng = np.random.default_rng(1)
        b = {"x": rng.normal(size=(4, 4)), "w": rng.normal(size=(4, 4))}
        expr = expr_of(lambda v: ad.reduce_sum(ad.gelu(ad.matmul(v["x"], v["w"]))), ["x", "w"])
        a = ad.evaluate(expr, b).data
        c = ad.evaluate(expr, b).data
        assert a.tobytes() == c.tobytes()

    def test_softmax_rows_are_distributions(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.normal(size=(5, 7)) * rng.uniform(0.1, 20)
            y = ad.softmax(ad.Tensor(x), axis=-1).data
            assert np.all(y >= 0)
            np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)

    def test_l2_rows_unit(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6, 5))
        y = ad.l2_normalize(ad.Tensor(x), axis=-1).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-6)


class TestGradients:
    def test_square_at_three(self):
        g = ad.gradient(expr_of(lambda v: v["x"] * v["x"], ["x"]), {"x": np.array(3.0)})
        np.testing.assert_allclose(g["x"], 6.0)

    def test_softmax_jacobian_row(self):
        expr = expr_of(lambda v: ad.softmax(v["x"], axis=0)[0], ["x"])
        g = ad.gradient(expr, {"x": np.array([0.0, 0.0])})
        np.testing.assert_allclose(g["x"], [0.25, -0.25], atol=1e-12)

    def test_gradient_of_constant_is_zero(self):
        expr = expr_of(lambda v: ad.reduce_sum(v["x"].detach() * v["x"].detach()), ["x"])
        g = ad.gradient(expr, {"x": np.ones(3)})
        np.testing.assert_array_equal(g["x"], np.zeros(3))

    def test_grad_accumulates_over_reuse(self):
        def fn(v):
            x = v["x"]
            return ad.reduce_sum(x * x + x)
        g = ad.gradient(expr_of(fn, ["x"]), {"x": np.array([2.0, -1.0])})
        np.testing.assert_allclose(g["x"], [5.0, -1.0])


class TestGradCheck:
    def test_quadratic_form_tight(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 5))
        expr = expr_of(
            lambda v: ad.reduce_sum(v["x"] * ad.matmul(ad.Tensor(a), v["x"].reshape(5, 1)).reshape(5)),
            ["x"])
        err = ad.grad_check(expr, {"x": rng.normal(size=5)}, eps=1e-5)
        assert err < 1e-7

    def test_layer_norm_composite(self):
        rng = np.random.default_rng(5)
        b = {"x": rng.normal(size=(3, 6)), "g": rng.normal(size=6), "b": rng.normal(size=6)}
        expr = expr_of(
            lambda v: ad.reduce_sum(ad.gelu(ad.layer_norm(v["x"]) * v["g"] + v["b"])),
            ["x", "g", "b"])
        assert ad.grad_check(expr, b, eps=1e-5) < 1e-5


def _primitive_cases():
    rng = np.random.default_rng(6)
    x34 = rng.normal(size=(3, 4))
    y34 = rng.normal(size=(3, 4))
    y14 = rng.normal(size=(1, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    away = rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 0.2
    m23 = rng.normal(size=(2, 3))
    m34 = rng.normal(size=(3, 4))
    batched = rng.normal(size=(2, 3, 4))
    w45 = rng.normal(size=(4, 5))
    idx = np.array([2, 0, 1, 2])
    bidx = np.array([[0, 2], [1, 1]])

    return [
        ("add", lambda v: ad.reduce_sum(ad.exp(v["a"] + v["b"])), {"a": x34, "b": y34}),
        ("add_broadcast", lambda v: ad.reduce_sum(ad.exp(v["a"] + v["b"])), {"a": x34, "b": y14}),
        ("sub", lambda v: ad.reduce_sum(ad.exp(v["a"] - v["b"])), {"a": x34, "b": y14}),
        ("mul", lambda v: ad.reduce_sum(ad.gelu(v["a"] * v["b"])), {"a": x34, "b": y34}),
        ("div", lambda v: ad.reduce_sum(v["a"] / v["b"]), {"a": x34, "b": pos}),
        ("neg", lambda v: ad.reduce_sum(ad.exp(-v["a"])), {"a": x34}),
        ("matmul", lambda v: ad.reduce_sum(ad.gelu(ad.matmul(v["a"], v["b"]))), {"a": m23, "b": m34}),
        ("matmul_batched", lambda v: ad.reduce_sum(ad.gelu(ad.matmul(v["a"], v["b"]))), {"a": batched, "b": w45}),
        ("exp", lambda v: ad.reduce_sum(ad.exp(v["a"])), {"a": x34}),
        ("log", lambda v: ad.reduce_sum(ad.log(v["a"])), {"a": pos}),
        ("relu", lambda v: ad.reduce_sum(ad.relu(v["a"]) * v["a"]), {"a": away}),
        ("gelu", lambda v: ad.reduce_sum(ad.gelu(v["a"])), {"a": x34}),
        ("softmax", lambda v: ad.reduce_sum(ad.softmax(v["a"], axis=-1) * v["a"]), {"a": x34}),
        ("log_softmax", lambda v: ad.reduce_sum(ad.log_softmax(v["a"], axis=-1) * v["a"]), {"a": x34}),
        ("layer_norm", lambda v: ad.reduce_sum(ad.gelu(ad.layer_norm(v["a"]))), {"a": x34}),
        ("l2_normalize", lambda v: ad.reduce_sum(ad.l2_normalize(v["a"], axis=-1) * v["a"]), {"a": pos}),
        ("max", lambda v: ad.reduce_sum(ad.reduce_max(v["a"], axis=1) * 2.0), {"a": x34}),
        ("min", lambda v: ad.reduce_sum(ad.reduce_min(v["a"], axis=0)), {"a": x34}),
        ("mean", lambda v: ad.reduce_sum(ad.reduce_mean(v["a"], axis=1, keepdims=True) * v["a"]), {"a": x34}),
        ("sum_axis", lambda v: ad.reduce_sum(ad.exp(ad.reduce_sum(v["a"], axis=0))), {"a": x34}),
        ("concat", lambda v: ad.reduce_sum(ad.gelu(ad.concat([v["a"], v["b"]], axis=1))), {"a": x34, "b": y34}),
        ("gather", lambda v: ad.reduce_sum(ad.gather(v["a"], idx) * 1.5), {"a": x34}),
        ("batched_gather", lambda v: ad.reduce_sum(ad.batched_gather(v["a"], bidx)), {"a": batched}),
        ("reshape", lambda v: ad.reduce_sum(ad.exp(ad.reshape(v["a"], (4, 3)))), {"a": x34}),
        ("transpose", lambda v: ad.reduce_sum(ad.gelu(ad.transpose(v["a"], (1, 0)))), {"a": x34}),
        ("broadcast_to", lambda v: ad.reduce_sum(ad.gelu(ad.broadcast_to(v["a"], (5, 3, 4)))), {"a": x34}),
        ("scalar_broadcast", lambda v: ad.reduce_sum(v["a"] * 2.5 + 0.3), {"a": x34}),
    ]


@pytest.mark.parametrize("name,fn,bindings", _primitive_cases(), ids=[c[0] for c in _primitive_cases()])
def test_primitive_grad_check(name, fn, bindings):
    err = ad.grad_check(expr_of(fn, list(bindings)), bindings, eps=1e-5)
    assert err < 1e-5, f"{name}: {err}"


class TestErrors:
    def test_unbound_leaf(self):
        expr = expr_of(lambda v: v["x"] + v["y"], ["x", "y"])
        with pytest.raises(ad.UnboundLeafError):
            ad.evaluate(expr, {"x": np.ones(2)})

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_non_scalar_gradient_root(self):
        expr = expr_of(lambda v: v["x"] * 2.0, ["x"])
        with pytest.raises(ad.ShapeMismatchError):
            ad.gradient(expr, {"x": np.ones(3)})

    def test_log_of_negative_is_nonfinite_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(ad.Tensor([-1.0]))

    def test_division_by_zero_is_nonfinite_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.Tensor([1.0]) / ad.Tensor([0.0])

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ad.NonFiniteError):
            ad.Tensor([np.inf])

    def test_l2_normalize_zero_slice(self):
        with pytest.raises(ad.NonFiniteError):
            ad.l2_normalize(ad.Tensor([[0.0, 0.0]]), axis=-1)

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather(ad.Tensor(np.ones((3, 2))), np.array([3]))


class TestStraightThroughBuildingBlocks:
    def test_detach_cuts_graph(self):
        x = ad.Tensor([2.0], requires_grad=True)
        y = ad.reduce_sum(x.detach() * x.detach())
        y.backward()
        assert x.grad is None

    def test_max_tie_goes_to_lowest_index(self):
        x = ad.Tensor(np.array([[1.0, 1.0, 0.5]]), requires_grad=True)
        y = ad.reduce_sum(ad.reduce_max(x, axis=1))
        y.backward()
        np.testing.assert_array_equal(x.grad, [[1.0, 0.0, 0.0]])
