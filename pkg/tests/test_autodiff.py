import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gfncp import autodiff as ad
from gfncp.autodiff import Tape, Tensor


def test_sum_of_squares_grad():
    tape = Tape()
    x = tape.leaf([1.0, 2.0, 3.0])
    ad.backward(tape, ad.sum(x * x))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_logsumexp_equal_logits_grad():
    tape = Tape()
    x = tape.leaf([0.0, 0.0])
    ad.backward(tape, ad.logsumexp(x))
    np.testing.assert_allclose(x.grad, [0.5, 0.5])


def test_logsumexp_large_inputs_stay_finite():
    y = ad.logsumexp(Tensor([1000.0, 1000.0]))
    assert y.item() == pytest.approx(1000.0 + np.log(2.0))


def test_logsumexp_mask_excludes_entries():
    x = Tensor([[0.0, 5.0], [1.0, 2.0]])
    y = ad.logsumexp(x, axis=1, mask=np.array([[True, False], [True, True]]))
    np.testing.assert_allclose(y.data, [0.0, np.logaddexp(1.0, 2.0)])


def test_fully_masked_slice_rejected():
    with pytest.raises(ad.ShapeError):
        ad.logsumexp(Tensor([[1.0, 2.0]]), axis=1, mask=np.array([[False, False]]))


def test_min_routes_gradient_to_first_argmin():
    tape = Tape()
    x = tape.leaf([3.0, 1.0, 1.0])
    ad.backward(tape, ad.min(x, axis=0))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_unused_leaf_gets_zero_grad():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    y = tape.leaf([5.0])
    ad.backward(tape, ad.sum(ad.square(x)))
    np.testing.assert_array_equal(y.grad, [0.0])


def test_grads_accumulate_across_calls():
    tape = Tape()
    x = tape.leaf([2.0])
    root = ad.sum(ad.square(x))
    ad.backward(tape, root)
    ad.backward(tape, root)
    np.testing.assert_allclose(x.grad, [8.0])


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_overflow_raises():
    with np.errstate(over="ignore"), pytest.raises(ad.NumericalOverflowError):
        Tensor([1e308]) * Tensor([1e308])


def test_non_scalar_root_rejected():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, x * 2.0)


def test_root_from_other_tape_rejected():
    t1, t2 = Tape(), Tape()
    x = t1.leaf([1.0])
    with pytest.raises(ad.TapeError):
        ad.backward(t2, ad.sum(x))


def test_mixing_tapes_rejected():
    with pytest.raises(ad.TapeError):
        Tape().leaf([1.0]) + Tape().leaf([1.0])


def test_constants_are_not_recorded():
    tape = Tape()
    x = tape.leaf([1.0])
    _ = Tensor([2.0]) * Tensor([3.0])
    assert len(tape) == 1
    assert x.requires_grad


def test_release_frees_graph():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    y = ad.sum(ad.square(x))
    ad.backward(tape, y)
    tape.release()
    assert len(tape) == 0


def test_grad_check_quadratic():
    assert ad.grad_check(lambda x: ad.sum(ad.square(x)), [1.0, 2.0], step=1e-5) < 1e-8


def test_grad_check_constant():
    assert ad.grad_check(lambda x: Tensor(3.0), [1.0, 2.0]) == 0.0


def test_grad_check_step_bounds():
    with pytest.raises(ValueError):
        ad.grad_check(lambda x: ad.sum(x), [1.0], step=1e-2)


def test_grad_check_nonfinite_raises():
    with np.errstate(over="ignore"), pytest.raises(ad.NumericalOverflowError):
        ad.grad_check(lambda x: ad.sum(x * 1e308) * 1e308, [1.0])


def test_grad_check_mlp_loss(rng):
    w1 = rng.normal(size=(3, 5))
    xin = rng.uniform(-2, 2, size=(4, 3))

    def f(w):
        h = ad.relu(ad.affine(xin, w, np.zeros(5)))
        return ad.logsumexp(ad.reshape(ad.sum(h, axis=1), (-1,)))

    assert ad.grad_check(f, w1) < 1e-6


def test_index_and_concat_backward():
    tape = Tape()
    x = tape.leaf(np.arange(6.0).reshape(2, 3))
    y = ad.concat([x[0], x[:, 1], x[np.array([1, 1])].reshape(-1)], axis=0)
    ad.backward(tape, ad.sum(y))
    np.testing.assert_allclose(x.grad, [[1, 2, 1], [2, 3, 2]])


def test_spmm_matches_dense(rng):
    import scipy.sparse as sp
    m = sp.random(4, 5, density=0.5, random_state=0, format="csr")
    xv = rng.normal(size=(5, 2))
    np.testing.assert_allclose(ad.spmm(m, Tensor(xv)).data, m.toarray() @ xv)
    assert ad.grad_check(lambda x: ad.sum(ad.square(ad.spmm(m, x))), xv) < 1e-6


# every kernel: analytic gradients against central differences on random inputs in [-2, 2]
vec = arrays(np.float64, (3, 4), elements=st.floats(-2, 2))

KERNELS = {
    "add": lambda x: ad.add(x, ad.square(x)),
    "sub": lambda x: ad.sub(ad.square(x), x[0]),
    "mul": lambda x: ad.mul(x, x[1]),
    "neg": lambda x: ad.neg(ad.square(x)),
    "scale": lambda x: ad.scale(ad.square(x), -1.7),
    "square": ad.square,
    "relu": lambda x: ad.relu(ad.add(x, 0.123)),
    "matmul": lambda x: ad.matmul(x, ad.reshape(x, (4, 3))),
    "affine": lambda x: ad.affine(x, ad.reshape(ad.square(x), (4, 3)), x[0, :3]),
    "sum0": lambda x: ad.sum(ad.square(x), axis=0),
    "mean1": lambda x: ad.mean(ad.square(x), axis=1),
    "logsumexp": lambda x: ad.logsumexp(x, axis=1),
    "min": lambda x: ad.min(ad.add(x, np.arange(12.0).reshape(3, 4) * 0.37), axis=1),
    "concat": lambda x: ad.concat([x, ad.square(x)], axis=0),
    "reshape": lambda x: ad.reshape(ad.square(x), (2, 6)),
    "index": lambda x: ad.square(x[1:, ::2]),
}


@pytest.mark.parametrize("name", sorted(KERNELS))
@settings(max_examples=15, deadline=None)
@given(x=vec)
def test_kernel_jvp_matches_finite_differences(name, x):
    if name == "relu" and np.any(np.abs(x + 0.123) < 1e-4):
        return
    weights = np.random.default_rng(0).normal(size=KERNELS[name](Tensor(x)).shape)

    def f(t):
        return ad.sum(ad.mul(KERNELS[name](t), weights))

    assert ad.grad_check(f, x, step=1e-6) < 1e-6


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, (5,), elements=st.floats(-50, 50)))
def test_logsumexp_shift_identity(x):
    m = x.max()
    a = ad.logsumexp(Tensor(x)).item()
    b = ad.logsumexp(Tensor(x - m)).item() + m
    assert abs(a - b) < 1e-12
