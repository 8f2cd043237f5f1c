import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posr import tensor as T
from posr.errors import DomainError, NonDeterministicLossError, NonScalarLossError, ShapeError
from posr.losses import dce_loss, gcpl_probs, sq_euclidean
from posr.tensor import Parameter, Tensor, backward, grad_check, primitive_forward


def test_add_example():
    out = primitive_forward("add", [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
    np.testing.assert_array_equal(out.values, [4.0, 6.0])


def test_matmul_all_ones():
    out = primitive_forward("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1)))])
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out.values, 3.0)


def test_elu_negative_one():
    out = primitive_forward("elu", [Tensor([-1.0])], alpha=1.0)
    assert out.values[0] == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    assert out.values[0] == pytest.approx(-0.6321, abs=1e-4)


def test_values_are_float64():
    assert Tensor(np.arange(3, dtype=np.int32)).values.dtype == np.float64
    out = T.exp(Tensor(np.ones(2, dtype=np.float32)))
    assert out.values.dtype == np.float64


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_log_domain_error():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([-2.0]))


def test_unknown_op_kind():
    with pytest.raises(ValueError, match="unknown op"):
        primitive_forward("sigmoid", [Tensor([0.0])])


def test_backward_square_sum():
    w = Parameter([1.0, 2.0], "w")
    grads = backward(T.sum_(T.square(w)))
    np.testing.assert_array_equal(grads["w"], [2.0, 4.0])
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    w = Parameter([1.0, 2.0], "w")
    with pytest.raises(NonScalarLossError):
        backward(T.square(w))


def test_unreached_param_gets_zeros():
    w, u = Parameter([1.0, 2.0], "w"), Parameter(np.ones((2, 2)), "u")
    grads = backward(T.sum_(w), params=[w, u])
    np.testing.assert_array_equal(grads["u"], np.zeros((2, 2)))


def test_dce_gradient_at_own_prototype_is_zero_for_true_point():
    # f(x) equal to the true prototype: the distance minimum is stationary in m_true
    m = Parameter([[0.5, -1.0], [2.0, 3.0]], "m")
    f = Tensor([[0.5, -1.0]])
    grads = backward(dce_loss(gcpl_probs(sq_euclidean(f, m)), np.array([0])))
    np.testing.assert_allclose(grads["m"][0], 0.0, atol=1e-15)
    assert np.any(grads["m"][1] != 0)


def test_two_consumers_accumulate():
    x = Parameter([0.3, -1.2, 2.0], "x")
    h = T.exp(x)
    loss = T.add(T.sum_(T.square(h)), T.sum_(T.scale(h, 3.0)))
    grads = backward(loss)
    e = np.exp(x.values)
    np.testing.assert_allclose(grads["x"], 2 * e * e + 3 * e, rtol=1e-14)


def test_backward_overwrites_previous_grad():
    w = Parameter([1.0, 2.0], "w")
    backward(T.sum_(T.square(w)))
    backward(T.sum_(T.square(w)))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_no_grad_records_nothing():
    w = Parameter([1.0], "w")
    with T.no_grad():
        out = T.square(w)
    assert out.op is None and not out.requires_grad
    assert T.is_grad_enabled()


def test_graph_values_are_read_only():
    out = T.square(Parameter([1.0, 2.0], "w"))
    with pytest.raises(ValueError):
        out.values[0] = 5.0


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 2, 4, 20))
    w = rng.normal(size=(5, 2, 3))
    a = T.elu(T.conv1d_temporal(Tensor(x), Tensor(w)))
    b = T.elu(T.conv1d_temporal(Tensor(x), Tensor(w)))
    assert a.values.tobytes() == b.values.tobytes()


def test_conv1d_temporal_matches_loop():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 4, 9)), rng.normal(size=(5, 3, 3))
    out = T.conv1d_temporal(Tensor(x), Tensor(w)).values
    ref = np.zeros((2, 5, 4, 7))
    for b in range(2):
        for fo in range(5):
            for h in range(4):
                for t in range(7):
                    ref[b, fo, h, t] = sum(x[b, fi, h, t + k] * w[fo, fi, k] for fi in range(3) for k in range(3))
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_spatial_matches_loop():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 4, 6)), rng.normal(size=(5, 3, 4))
    out = T.conv_spatial(Tensor(x), Tensor(w)).values
    ref = np.einsum("bfht,ofh->bot", x, w)[:, :, None, :]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_max_pool_drops_remainder():
    x = Tensor(np.array([[1.0, 5.0, 2.0, 3.0, 9.0]]))
    np.testing.assert_array_equal(T.max_pool_time(x, 2).values, [[5.0, 3.0]])


# ------------------------------------------------------------ finite differences per primitive


def _fd_case(op, rng):
    """Return (build_loss, params) exercising one primitive on inputs in [-2, 2]."""
    u = lambda *shape: rng.uniform(-2, 2, shape)
    pos = lambda *shape: rng.uniform(0.5, 2, shape)
    a = Parameter(u(3, 4), "a")

    def wrap(out_fn, params):
        # random projection makes the scalar loss sensitive to every output entry
        cache = {}

        def build():
            out = out_fn()
            if "w" not in cache:
                cache["w"] = Tensor(rng.uniform(-1, 1, out.shape))
            return T.sum_(T.multiply(out, cache["w"]))

        return build, params

    if op == "add":
        b = Parameter(u(4), "b")
        return wrap(lambda: T.add(a, b), [a, b])
    if op == "subtract":
        b = Parameter(u(3, 1), "b")
        return wrap(lambda: T.subtract(a, b), [a, b])
    if op == "elementwise_multiply":
        b = Parameter(u(3, 4), "b")
        return wrap(lambda: T.multiply(a, b), [a, b])
    if op == "scalar_multiply":
        return wrap(lambda: T.scale(a, -1.7), [a])
    if op == "negate":
        return wrap(lambda: T.negate(a), [a])
    if op == "matmul":
        b = Parameter(u(4, 2), "b")
        return wrap(lambda: T.matmul(a, b), [a, b])
    if op == "transpose":
        return wrap(lambda: T.transpose(a), [a])
    if op == "conv1d_temporal":
        x, w = Parameter(u(2, 2, 3, 8), "x"), Parameter(u(3, 2, 3), "w")
        return wrap(lambda: T.conv1d_temporal(x, w), [x, w])
    if op == "conv_spatial":
        x, w = Parameter(u(2, 2, 3, 5), "x"), Parameter(u(4, 2, 3), "w")
        return wrap(lambda: T.conv_spatial(x, w), [x, w])
    if op == "elu":
        # keep away from the kink at 0 where the central difference straddles two branches
        v = u(3, 4)
        v[np.abs(v) < 0.05] = 0.5
        x = Parameter(v, "x")
        return wrap(lambda: T.elu(x), [x])
    if op == "exp":
        return wrap(lambda: T.exp(a), [a])
    if op == "log":
        x = Parameter(pos(3, 4), "x")
        return wrap(lambda: T.log(x), [x])
    if op == "square":
        return wrap(lambda: T.square(a), [a])
    if op == "sum":
        return wrap(lambda: T.sum_(a, axis=0), [a])
    if op == "mean":
        return wrap(lambda: T.mean(a, axis=1, keepdims=True), [a])
    if op == "max_pool_time":
        # distinct values so the argmax is stable under the perturbation
        x = Parameter(rng.permutation(24).reshape(2, 12) * 0.15 - 1.8, "x")
        return wrap(lambda: T.max_pool_time(x, 3), [x])
    if op == "reshape":
        return wrap(lambda: T.reshape(a, (2, 6)), [a])
    if op == "concat":
        b = Parameter(u(2, 4), "b")
        return wrap(lambda: T.concat([a, b], axis=0), [a, b])
    if op == "maximum_with_scalar":
        v = u(3, 4)
        v[np.abs(v - 0.3) < 0.05] = 1.0
        x = Parameter(v, "x")
        return wrap(lambda: T.maximum_scalar(x, 0.3), [x])
    raise AssertionError(op)


@pytest.mark.parametrize("op", sorted(T.VJP))
def test_primitive_matches_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    build, params = _fd_case(op, rng)
    report = grad_check(build, params, h=1e-5, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_every_primitive_has_an_adjoint():
    assert set(T.PRIMITIVES) == set(T.VJP)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(sorted(T.VJP)))
def test_primitive_fd_property(seed, op):
    build, params = _fd_case(op, np.random.default_rng(seed))
    assert grad_check(build, params).passed


def test_random_three_layer_net_gradients():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(4, 5)))
    w1, w2, w3 = (Parameter(rng.uniform(-1, 1, s), f"w{i}") for i, s in enumerate([(5, 6), (6, 4), (4, 1)]))

    def build():
        h = T.elu(T.matmul(x, w1))
        h = T.elu(T.matmul(h, w2))
        return T.mean(T.square(T.matmul(h, w3)))

    report = grad_check(build, [w1, w2, w3])
    assert report.passed and report.worst <= 1e-4


# ------------------------------------------------------------ grad_check contract


def test_grad_check_quadratic_is_exact():
    w = Parameter([0.3, -1.1, 2.0], "w")
    report = grad_check(lambda: T.sum_(T.square(w)), [w])
    assert report.max_rel_error["w"] < 1e-10


def test_grad_check_skips_detached_input():
    w = Parameter([1.0, 2.0], "w")
    x = Tensor([3.0, -1.0])
    report = grad_check(lambda: T.sum_(T.multiply(T.square(w), x)), [w, x])
    assert list(report.max_rel_error) == ["w"]


def test_grad_check_detects_nondeterminism():
    w = Parameter([1.0], "w")
    counter = iter(range(100))
    with pytest.raises(NonDeterministicLossError):
        grad_check(lambda: T.sum_(T.scale(w, float(next(counter)))), [w])


def test_grad_check_flags_wrong_adjoint(monkeypatch):
    monkeypatch.setitem(T.VJP, "square", lambda g, out: (-2.0 * g * out.inputs[0].values,))
    w = Parameter([0.5, -1.5], "w")
    report = grad_check(lambda: T.sum_(T.square(w)), [w])
    assert report.failures == ["w"]


def test_relative_error_definition():
    err = T.relative_error(np.array([1.0, 0.0]), np.array([3.0, 0.0]))
    np.testing.assert_allclose(err, [0.5, 0.0])
