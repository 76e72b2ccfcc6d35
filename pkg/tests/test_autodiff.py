"""Tensor core: forward semantics frozen by hand, gradients against finite differences."""

import numpy as np
import pytest

from tirg.autodiff import (
    DimensionError,
    Parameter,
    Tensor,
    add,
    avg_pool_spatial,
    broadcast_text,
    concat,
    conv2d,
    gather_rows,
    grad_check,
    l2_norm,
    logsumexp,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sgd_step,
    sigmoid,
    softplus,
    tensor,
    tensor_sum,
    tanh,
    transpose,
)

RNG_BASE = 20260817


def numeric_grad(f, arrays, i, h=1e-5):
    """Independent central-difference gradient of f (ndarray -> float) in arrays[i].

    Deliberately reimplements differentiation outside the package so the
    package's own grad_check has a cross-check that shares no code with it.
    """
    out = np.zeros_like(arrays[i])
    flat = arrays[i].reshape(-1)
    gflat = out.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = f(arrays)
        flat[j] = orig - h
        fm = f(arrays)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return out


# ---------------------------------------------------------------------------
# frozen forward values
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = tensor(np.eye(2))
    np.testing.assert_array_equal(matmul(a, eye).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_basis_permutation():
    a = tensor([[1.0, 0.0], [0.0, 0.0]])
    p = tensor([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(matmul(a, p).data, [[0.0, 1.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(RNG_BASE)
    x = tensor(rng.normal(size=(5, 5, 2)))
    k = np.zeros((3, 3, 2, 2))
    for c in range(2):
        k[1, 1, c, c] = 1.0
    out = conv2d(x, tensor(k))
    np.testing.assert_allclose(out.data, x.data, rtol=0, atol=0)


def test_conv2d_overlap_counts():
    x = tensor(np.ones((4, 4, 1)))
    k = tensor(np.ones((3, 3, 1, 1)))
    out = conv2d(x, k).data[:, :, 0]
    assert out[0, 0] == 4.0 and out[0, 3] == 4.0 and out[3, 0] == 4.0 and out[3, 3] == 4.0
    assert out[0, 1] == 6.0 and out[1, 0] == 6.0 and out[2, 3] == 6.0
    assert out[1, 1] == 9.0 and out[2, 2] == 9.0


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(tensor(np.zeros((4, 4, 3))), tensor(np.zeros((3, 3, 2, 5))))


def test_conv2d_stride_two_shape():
    x = tensor(np.zeros((48, 48, 3)))
    k = tensor(np.zeros((3, 3, 3, 16)))
    assert conv2d(x, k, stride=2).data.shape == (24, 24, 16)


def test_conv2d_batched_matches_per_sample():
    rng = np.random.default_rng(RNG_BASE + 1)
    xs = rng.normal(size=(4, 6, 6, 3))
    k = tensor(rng.normal(size=(3, 3, 3, 5)))
    b = tensor(rng.normal(size=(5,)))
    batched = conv2d(tensor(xs), k, bias=b, stride=2).data
    for i in range(4):
        single = conv2d(tensor(xs[i]), k, bias=b, stride=2).data
        np.testing.assert_array_equal(batched[i], single)


def test_elementwise_frozen_points():
    assert sigmoid(tensor(0.0)).data == 0.5
    assert relu(tensor(-3.0)).data == 0.0
    assert relu(tensor(3.0)).data == 3.0
    assert tanh(tensor(0.0)).data == 0.0


def test_sigmoid_saturation_is_finite():
    out = sigmoid(tensor([-1e4, 1e4])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_softplus_matches_reference_and_stays_finite():
    x = np.array([-700.0, -2.0, 0.0, 2.0, 700.0])
    out = softplus(tensor(x)).data
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[1:4], np.log1p(np.exp(x[1:4])), rtol=1e-12)
    assert out[4] == 700.0 and out[0] < 1e-300


def test_broadcast_text_values():
    np.testing.assert_array_equal(broadcast_text(tensor([1.0, 2.0]), (1, 1)).data, [[[1.0, 2.0]]])
    out = broadcast_text(tensor([1.0, 2.0]), (2, 2)).data
    assert out.shape == (2, 2, 2)
    for i in range(2):
        for j in range(2):
            np.testing.assert_array_equal(out[i, j], [1.0, 2.0])


def test_broadcast_text_backward_scaling():
    t = tensor([1.5, -2.0], requires_grad=True)
    tensor_sum(broadcast_text(t, (3, 3))).backward()
    np.testing.assert_array_equal(t.grad, [9.0, 9.0])


def test_concat_values_and_shapes():
    np.testing.assert_array_equal(concat(tensor([1.0, 2.0]), tensor([3.0])).data, [1.0, 2.0, 3.0])
    out = concat(tensor(np.zeros((2, 2, 1))), tensor(np.ones((2, 2, 2))))
    assert out.data.shape == (2, 2, 3)
    with pytest.raises(DimensionError):
        concat(tensor(np.zeros((2, 3))), tensor(np.zeros((3, 3))))


def test_reductions_frozen_values():
    assert tensor_sum(tensor([1.0, 2.0, 3.0])).data == 6.0
    np.testing.assert_array_equal(avg_pool_spatial(tensor([[[1.0], [2.0]], [[3.0], [4.0]]])).data, [2.5])
    assert l2_norm(tensor([3.0, 4.0])).data == 5.0
    assert mean(tensor([1.0, 2.0, 3.0, 4.0])).data == 2.5


def test_reductions_reject_empty():
    with pytest.raises(ValueError):
        tensor_sum(tensor(np.zeros((0,))))


def test_logsumexp_frozen():
    out = logsumexp(tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [np.log(2.0)], rtol=1e-15)
    big = logsumexp(tensor([[1000.0, 1000.0]]))
    np.testing.assert_allclose(big.data, [1000.0 + np.log(2.0)], rtol=1e-15)


def test_gather_rows_forward():
    t = tensor(np.arange(6.0).reshape(2, 3))
    idx = np.array([[2, 0], [1, 1]])
    np.testing.assert_array_equal(gather_rows(t, idx).data, [[2.0, 0.0], [4.0, 4.0]])


# ---------------------------------------------------------------------------
# sgd_step
# ---------------------------------------------------------------------------


def test_sgd_step_frozen():
    p = Parameter(np.array([1.0]), name="p")
    p.grad = np.array([2.0])
    sgd_step([p], lr=0.1)
    np.testing.assert_allclose(p.data, [0.8], rtol=1e-15)
    assert p.grad is None


def test_sgd_step_lr_zero():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    p.grad = np.array([5.0, 5.0])
    sgd_step([p], lr=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_sgd_step_missing_grad_is_state_error():
    p = Parameter(np.array([1.0]), name="p")
    with pytest.raises(RuntimeError):
        sgd_step([p], lr=0.1)


def test_sgd_quadratic_convergence():
    # p <- p - 0.1 * 2(p-3) contracts by 0.8 per step: |p100 - 3| = 3 * 0.8**100 < 1e-6
    p = Parameter(np.array([0.0]), name="p")
    for _ in range(100):
        diff = add(p, tensor(np.array([-3.0])))
        tensor_sum(mul(diff, diff)).backward()
        sgd_step([p], lr=0.1)
    assert abs(p.data[0] - 3.0) < 1e-6


# ---------------------------------------------------------------------------
# graph mechanics
# ---------------------------------------------------------------------------


def test_shared_subexpression_accumulates_exactly():
    x = tensor(np.array([2.0]), requires_grad=True)
    tensor_sum(add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(RNG_BASE + 2)
    x = rng.normal(size=(3, 3, 2))
    t = tensor(x.copy())
    relu(t)
    sigmoid(t)
    conv2d(t, tensor(rng.normal(size=(3, 3, 2, 2))))
    avg_pool_spatial(t)
    np.testing.assert_array_equal(t.data, x)


def test_forward_bit_identical_within_process():
    rng = np.random.default_rng(RNG_BASE + 3)
    x = tensor(rng.normal(size=(5, 5, 3)))
    k = tensor(rng.normal(size=(3, 3, 3, 4)))
    a = conv2d(x, k).data
    b = conv2d(x, k).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# gradient checks, one suite per differentiable op
# ---------------------------------------------------------------------------

N_INSTANCES = 20
TOL = 1e-4


def rand(rng, *shape):
    return tensor(rng.normal(size=shape), requires_grad=True)


def rand_away_from_kink(rng, *shape):
    # keep |x| in [0.2, 1.5] so the relu kink cannot straddle the h=1e-5 stencil
    mag = rng.uniform(0.2, 1.5, size=shape)
    sign = rng.choice([-1.0, 1.0], size=shape)
    return tensor(mag * sign, requires_grad=True)


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_matmul(i):
    rng = np.random.default_rng(RNG_BASE + 10 + i)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    assert grad_check(lambda a, b: tensor_sum(matmul(a, b)), [a, b]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_conv2d(i):
    rng = np.random.default_rng(RNG_BASE + 40 + i)
    x, k, b = rand(rng, 5, 5, 2), rand(rng, 3, 3, 2, 3), rand(rng, 3)
    f = lambda x, k, b: tensor_sum(mul(conv2d(x, k, bias=b), conv2d(x, k, bias=b)))
    assert grad_check(f, [x, k, b]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_conv2d_strided_batched(i):
    rng = np.random.default_rng(RNG_BASE + 70 + i)
    x, k = rand(rng, 2, 6, 6, 2), rand(rng, 3, 3, 2, 4)
    f = lambda x, k: tensor_sum(sigmoid(conv2d(x, k, stride=2)))
    assert grad_check(f, [x, k]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_elementwise_chain(i):
    rng = np.random.default_rng(RNG_BASE + 100 + i)
    x = rand_away_from_kink(rng, 4, 3)
    y = rand(rng, 4, 3)
    f = lambda x, y: tensor_sum(mul(relu(x), add(sigmoid(y), tanh(mul(x, y)))))
    assert grad_check(f, [x, y]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_broadcast_add_mul(i):
    rng = np.random.default_rng(RNG_BASE + 130 + i)
    x, row, col = rand(rng, 3, 4), rand(rng, 1, 4), rand(rng, 3, 1)
    f = lambda x, row, col: tensor_sum(mul(add(x, row), col))
    assert grad_check(f, [x, row, col]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_broadcast_text_concat(i):
    rng = np.random.default_rng(RNG_BASE + 160 + i)
    fm, t = rand(rng, 3, 3, 2), rand(rng, 2)
    f = lambda fm, t: tensor_sum(mul(concat(fm, broadcast_text(t, (3, 3))), concat(fm, broadcast_text(t, (3, 3)))))
    assert grad_check(f, [fm, t]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_reductions(i):
    rng = np.random.default_rng(RNG_BASE + 190 + i)
    x = rand(rng, 4, 3, 2)
    f = lambda x: add(
        add(mean(tensor_sum(mul(x, x), axis=2)), l2_norm(x)),
        tensor_sum(avg_pool_spatial(x)),
    )
    assert grad_check(f, [x]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_softplus_logsumexp_gather(i):
    rng = np.random.default_rng(RNG_BASE + 220 + i)
    s = rand(rng, 4, 4)
    idx = np.stack([np.stack([np.array([j, (j + 1) % 4]) for j in range(3)]) for _ in range(4)])

    def f(s):
        g = gather_rows(s, idx)
        return add(mean(logsumexp(g)), mean(softplus(s)))

    assert grad_check(f, [s]) < TOL


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_grad_reshape_transpose(i):
    rng = np.random.default_rng(RNG_BASE + 250 + i)
    x = rand(rng, 3, 4)
    f = lambda x: tensor_sum(mul(matmul(x, transpose(x)), tensor(np.eye(3))))
    assert grad_check(f, [x]) < TOL
    y = rand(rng, 6, 2)
    g = lambda y: l2_norm(reshape(y, (3, 4)))
    assert grad_check(g, [y]) < TOL


# ---------------------------------------------------------------------------
# grad_check harness itself
# ---------------------------------------------------------------------------


def test_grad_check_constant_gradient_is_zero_error():
    rng = np.random.default_rng(RNG_BASE + 4)
    x = rand(rng, 5)
    assert grad_check(lambda x: tensor_sum(x), [x]) < 1e-9


def test_grad_check_agrees_with_independent_numeric_grad():
    rng = np.random.default_rng(RNG_BASE + 5)
    arr = rng.normal(size=(3, 3))

    def forward(arrays):
        return float(tensor_sum(sigmoid(tensor(arrays[0]))).data)

    want = numeric_grad(forward, [arr.copy()], 0)
    t = tensor(arr, requires_grad=True)
    tensor_sum(sigmoid(t)).backward()
    np.testing.assert_allclose(t.grad, want, atol=1e-8)


def test_grad_check_sigmoid_point():
    x = tensor(np.array([1.0]), requires_grad=True)
    assert grad_check(lambda x: tensor_sum(sigmoid(x)), [x]) < 1e-6


def test_grad_check_flags_corrupted_backward():
    def corrupted_square(t):
        out = Tensor(t.data * t.data, requires_grad=t.requires_grad, parents=(t,))

        def backward():
            t._accumulate(out.grad * 3.0 * t.data)  # wrong: true derivative is 2x

        out._backward = backward
        return out

    x = tensor(np.array([0.7, -1.3]), requires_grad=True)
    err = grad_check(lambda x: tensor_sum(corrupted_square(x)), [x])
    assert err > 1e-2


def test_grad_check_rejects_non_scalar():
    x = tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda x: add(x, x), [x])


def test_grad_check_rejects_fp32():
    x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda x: tensor_sum(x), [x])
