"""Tensor graph, reverse-mode gradients, and Adam/AdamW updates."""
import numpy as np
import pytest

from poselab.autodiff import (
    Graph, NonFiniteError, ShapeError, as_tensor, grad_check, make_optim, step,
)
from poselab.rng import SplitMix64


def test_relu_definition():
    g = Graph()
    out = g.relu(g.constant([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g.value(out), [0.0, 0.0, 2.0])


def test_l2norm_345_triangle():
    g = Graph()
    out = g.l2norm(g.constant([3.0, 4.0]))
    assert g.value(out)[0] == 5.0


def test_matmul_row_sums():
    g = Graph()
    out = g.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((3, 1))))
    np.testing.assert_array_equal(g.value(out), [[3.0], [3.0]])


def test_sum_gradient_all_ones():
    g = Graph()
    p = g.param(np.arange(6.0).reshape(2, 3))
    grads = g.backward(g.sum(p))
    np.testing.assert_array_equal(grads[p], np.ones((2, 3)))


def test_l2norm_zero_subgradient():
    g = Graph()
    p = g.param([0.5, -0.25, 1.0])
    c = g.constant([0.5, -0.25, 1.0])
    grads = g.backward(g.l2norm(g.sub(p, c)))
    np.testing.assert_array_equal(grads[p], np.zeros(3))


def test_nonscalar_loss_rejected():
    g = Graph()
    p = g.param([1.0, 2.0])
    with pytest.raises(ShapeError):
        g.backward(g.relu(p))


def test_shape_mismatch_names_both_shapes():
    g = Graph()
    a = g.constant(np.ones((2, 3)))
    b = g.constant(np.ones((4, 1)))
    with pytest.raises(ShapeError, match=r"2, 3.*4, 1"):
        g.matmul(a, b)


def test_unreached_param_gets_zero_gradient():
    g = Graph()
    p = g.param([1.0, 2.0])
    q = g.param([3.0])
    grads = g.backward(g.sum(p))
    np.testing.assert_array_equal(grads[q], [0.0])


def test_nonfinite_input_rejected():
    g = Graph()
    with pytest.raises(NonFiniteError):
        g.constant([1.0, np.inf])


def test_forward_deterministic_bit_identical():
    rng = SplitMix64(7)
    a = np.array(rng.normals(12)).reshape(3, 4)
    b = np.array(rng.normals(8)).reshape(4, 2)

    def run():
        g = Graph()
        out = g.exp(g.smul(g.matmul(g.constant(a), g.constant(b)), 0.1))
        return g.value(g.sum(out)).tobytes()

    assert run() == run()


# -- finite-difference checks, one per op kind -------------------------------

def _rand(rng, *shape):
    return np.array(rng.normals(int(np.prod(shape)))).reshape(shape)


def _fd_case(name, rng):
    """Return (params, builder) whose loss is differentiable at the sample."""
    if name == "matmul":
        a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
        return [a, b], lambda g, p: g.sum(g.matmul(p[0], p[1]))
    if name == "add":
        a, b = _rand(rng, 2, 3), _rand(rng, 1, 3)
        return [a, b], lambda g, p: g.l2norm(g.add(p[0], p[1]))
    if name == "relu":
        a = _rand(rng, 8)
        a[np.abs(a) < 0.05] = 0.5  # keep clear of the kink
        return [a], lambda g, p: g.sum(g.relu(p[0]))
    if name == "concat":
        a, b = _rand(rng, 2, 3), _rand(rng, 4, 3)
        return [a, b], lambda g, p: g.l2norm(g.concat((p[0], p[1]), axis=0))
    if name == "slice":
        a = _rand(rng, 6, 2)
        return [a], lambda g, p: g.l2norm(g.slice_rows(p[0], 1, 4))
    if name == "mul":
        a, b = _rand(rng, 3, 2), _rand(rng, 3, 1)
        return [a, b], lambda g, p: g.sum(g.mul(p[0], p[1]))
    if name == "smul":
        a = _rand(rng, 5)
        return [a], lambda g, p: g.l2norm(g.smul(p[0], -1.7))
    if name == "sum":
        a = _rand(rng, 4, 3)
        return [a], lambda g, p: g.mul(g.sum(p[0]), g.sum(p[0]))
    if name == "mean":
        a = _rand(rng, 7)
        return [a], lambda g, p: g.mul(g.mean(p[0]), g.mean(p[0]))
    if name == "l2norm":
        a = _rand(rng, 6) + 3.0  # away from the zero kink
        return [a], lambda g, p: g.l2norm(p[0])
    if name == "l1loss":
        a = _rand(rng, 5)
        b = a + np.where(_rand(rng, 5) >= 0, 1.0, -1.0)  # |a-b| = 1 everywhere
        return [a, b], lambda g, p: g.l1loss(p[0], p[1])
    if name == "exp":
        a = 0.3 * _rand(rng, 4)
        return [a], lambda g, p: g.sum(g.exp(p[0]))
    if name == "neg":
        a = _rand(rng, 3, 3)
        return [a], lambda g, p: g.l2norm(g.neg(p[0]))
    if name == "unit":
        a = _rand(rng, 5) + np.array([2.0, 0, 0, 0, 0])
        w = _rand(rng, 5)
        return [a], lambda g, p: g.sum(g.mul(g.unit(p[0]), g.constant(w)))
    raise AssertionError(name)


@pytest.mark.parametrize("kind", [
    "matmul", "add", "relu", "concat", "slice", "mul", "smul",
    "sum", "mean", "l2norm", "l1loss", "exp", "neg", "unit",
])
def test_op_gradients_match_finite_differences(kind):
    rng = SplitMix64(hash(kind) & 0xFFFF)
    for trial in range(3):
        params, builder = _fd_case(kind, rng)
        res = grad_check(builder, params, fd_step=1e-5)
        assert res.max_rel_error < 1e-4, (kind, trial, res.per_param)


def test_grad_check_linear_model_exact():
    rng = SplitMix64(0)
    w = _rand(rng, 4, 1)
    x = _rand(rng, 3, 4)

    def build(g, p):
        return g.sum(g.matmul(g.constant(x), p[0]))

    assert grad_check(build, [w]).max_rel_error < 1e-8


def test_grad_check_four_layer_mlp():
    rng = SplitMix64(0)
    widths = [5, 7, 6, 4, 1]
    params = []
    for din, dout in zip(widths[:-1], widths[1:]):
        params.append(_rand(rng, din, dout) * 0.7)
        params.append(_rand(rng, 1, dout) * 0.1)
    x = _rand(rng, 2, 5)

    def build(g, p):
        h = g.constant(x)
        for i in range(4):
            h = g.add(g.matmul(h, p[2 * i]), p[2 * i + 1])
            if i < 3:
                h = g.relu(h)
        return g.sum(h)

    assert grad_check(build, params).max_rel_error < 1e-4


# -- optimizers ---------------------------------------------------------------

def test_adam_zero_gradient_fixed_point():
    p = [as_tensor([1.5, -2.0])]
    st = make_optim("adam", p, lr=0.1)
    out = step(st, p, [np.zeros(2)])
    np.testing.assert_array_equal(out[0], p[0])


def test_adam_single_step_hand_computed():
    lr, eps, gval = 0.01, 1e-10, 3.0
    p = [as_tensor([2.0])]
    st = make_optim("adam", p, lr=lr, eps=eps)
    out = step(st, p, [as_tensor([gval])])
    # Bias-corrected first step: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
    expected = 2.0 - lr * gval / (abs(gval) + eps)
    assert out[0][0] == pytest.approx(expected, abs=1e-15)


def test_adamw_zero_gradient_decays_params():
    lr, wd = 0.05, 0.2
    p = [as_tensor([[4.0, -1.0]])]
    st = make_optim("adamw", p, lr=lr, weight_decay=wd)
    out = step(st, p, [np.zeros((1, 2))])
    np.testing.assert_allclose(out[0], p[0] * (1.0 - lr * wd), rtol=0, atol=1e-15)


def test_adam_rejects_weight_decay():
    with pytest.raises(ValueError):
        make_optim("adam", [as_tensor([1.0])], lr=0.1, weight_decay=0.1)


def test_step_rejects_nonfinite_gradient_naming_param():
    p = [as_tensor([1.0]), as_tensor([2.0])]
    st = make_optim("adam", p, lr=0.1)
    bad = [np.zeros(1), np.array([np.nan])]
    with pytest.raises(NonFiniteError, match="trunk.b"):
        step(st, p, bad, names=["trunk.w", "trunk.b"])


def test_adam_converges_on_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p = [np.zeros(3)]
    st = make_optim("adam", p, lr=0.05)
    for _ in range(2000):
        g = Graph()
        pid = g.param(p[0])
        diff = g.sub(pid, g.constant(target))
        grads = g.backward(g.sum(g.mul(diff, diff)))
        p = step(st, p, [grads[pid]])
    np.testing.assert_allclose(p[0], target, atol=1e-3)
