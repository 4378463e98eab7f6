import threading

import numpy as np
import pytest
from pyharvim import (
    DetachedTapeException,
    DomainException,
    NonFiniteException,
    SeededRng,
    ShapeMismatchException,
    Tensor,
    backward,
    enable_grad,
    finite_diff_grad,
    get_default_dtype,
    grad,
    matmul,
    no_grad,
    precision,
    relative_error,
)
from pyharvim.gradcheck import check_gradient, check_ops


def leaf(values):
    return Tensor(values, requires_grad=True, dtype=np.float64)


def test_broadcast_add_has_broadcast_shape():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.arange(3.0))
    assert (a + b).shape == (2, 3)


def test_incompatible_shapes_raise():
    with pytest.raises(ShapeMismatchException):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_random_shape_pairs_broadcast_like_numpy():
    rng = SeededRng(3)
    for _ in range(50):
        rows, cols = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        other = [(rows, cols), (1, cols), (cols,), (rows, 1), ()][int(rng.integers(0, 5))]
        a, b = rng.normal((rows, cols)), rng.normal(other)
        assert (Tensor(a) * Tensor(b)).shape == np.broadcast_shapes(a.shape, np.shape(b))


def test_matmul_examples():
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor([[5.0], [6.0]])).numpy(), [[5.0], [6.0]])
    assert np.array_equal(matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]])).numpy(), [[3.0], [7.0]])
    assert np.array_equal(matmul(Tensor(np.zeros((2, 2))), Tensor([[5.0], [6.0]])).numpy(), [[0.0], [0.0]])


def test_matmul_rejects_vectors_and_bad_inner_dimension():
    with pytest.raises(ShapeMismatchException):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))
    with pytest.raises(ShapeMismatchException):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_sum_of_squares():
    x = leaf([1.0, 2.0, 3.0])
    backward((x * x).sum())
    assert np.allclose(x.grad.numpy(), [2.0, 4.0, 6.0])


def test_backward_accumulates_over_reuse():
    x = leaf([2.0])
    backward((x * x + x * 3.0).sum())
    assert np.allclose(x.grad.numpy(), [7.0])


def test_constant_root_gives_no_gradient():
    x = leaf([1.0, 2.0])
    root = Tensor(5.0)
    assert backward(root) == {}
    assert x.grad is None
    (g,) = grad(root, [x])
    assert np.array_equal(g.numpy(), [0.0, 0.0])


def test_leaves_without_requires_grad_stay_untouched():
    x = leaf([1.0])
    y = Tensor([2.0], dtype=np.float64)
    backward((x * y).sum())
    assert y.grad is None
    assert np.allclose(x.grad.numpy(), [2.0])


def test_non_scalar_root_raises():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeMismatchException):
        backward(x * 2.0)


def test_second_backward_on_released_tape_raises():
    x = leaf([1.0, 2.0])
    root = (x * x).sum()
    backward(root)
    with pytest.raises(DetachedTapeException):
        backward(root)


def test_retain_graph_allows_second_pass():
    x = leaf([1.0, 2.0])
    root = (x * x).sum()
    backward(root, retain_graph=True)
    backward(root)
    assert np.allclose(x.grad.numpy(), [4.0, 8.0])


def test_grad_of_intermediate_tensor():
    x = leaf([1.0, 2.0])
    h = x * 3.0
    (g,) = grad((h * h).sum(), [h])
    assert np.allclose(g.numpy(), [6.0, 12.0])


def test_grad_restricted_to_one_of_two_inputs():
    x = leaf([1.0, 2.0])
    y = leaf([3.0, 4.0])
    gx, gy = grad((x * y).sum(), [x, y], retain_graph=True)
    (only_y,) = grad((x * y).sum(), [y])
    assert np.allclose(gx.numpy(), [3.0, 4.0])
    assert np.allclose(only_y.numpy(), gy.numpy())


def test_double_backward_of_cube():
    x = leaf(2.0)
    with enable_grad():
        (first,) = grad(x * x * x, [x], create_graph=True)
        (second,) = grad(first, [x])
    assert first.item() == pytest.approx(12.0)
    assert second.item() == pytest.approx(12.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y.is_leaf


def test_domain_errors():
    with pytest.raises(DomainException):
        Tensor([0.0, 1.0]).log()
    with pytest.raises(DomainException):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(DomainException):
        Tensor([-1.0]) ** 0.5


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteException):
        Tensor([np.nan])
    with pytest.raises(NonFiniteException):
        Tensor([1000.0], dtype=np.float32).exp()


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_precision_switch_is_scoped():
    assert get_default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with precision("float16"):
            pass


def test_precision_switch_stays_on_its_thread():
    seen = []
    with precision("float64"):
        worker = threading.Thread(target=lambda: seen.append(Tensor([1.0]).dtype))
        worker.start()
        worker.join()
        assert get_default_dtype() == np.float64
    assert seen == [np.float32]


def test_finite_diff_of_square():
    assert finite_diff_grad(lambda t: (t * t).sum(), [1.0], 1e-5).numpy()[0] == pytest.approx(2.0, abs=1e-6)


def test_finite_diff_of_constant_is_zero():
    estimate = finite_diff_grad(lambda t: Tensor(3.0), [1.0, -2.0, 0.5]).numpy()
    assert np.allclose(estimate, 0.0)


def test_finite_diff_rejects_non_finite_objective():
    with pytest.raises(NonFiniteException):
        finite_diff_grad(lambda t: float("inf"), [1.0])


def test_mlp_gradient_matches_finite_differences():
    with precision("float64"):
        rng = SeededRng(11)
        w0, w1, w2 = rng.normal((4, 6)), rng.normal((6, 6)), rng.normal((6, 1))

        def mlp(x):
            hidden = (x.reshape(1, 4) @ Tensor(w0)).tanh()
            hidden = (hidden @ Tensor(w1)).sigmoid()
            return (hidden @ Tensor(w2)).sum()

        error, _ = check_gradient(mlp, rng.normal((4,)))
    assert error < 1e-4


def test_every_op_matches_finite_differences():
    with precision("float64"):
        result = check_ops(SeededRng(0), cases=100)
    assert result.passed, result.failures
    assert result.cases >= 100


def test_seeded_rng_is_deterministic():
    assert np.array_equal(SeededRng(5).normal((10,)), SeededRng(5).normal((10,)))
    assert not np.array_equal(SeededRng(5).normal((10,)), SeededRng(6).normal((10,)))


def test_spawned_streams_are_independent_and_reproducible():
    parent = SeededRng(1)
    assert np.array_equal(parent.spawn(3).normal((4,)), SeededRng(1).spawn(3).normal((4,)))
    assert not np.array_equal(parent.spawn(0).normal((4,)), parent.spawn(1).normal((4,)))


def test_relative_error_is_zero_for_equal_arrays():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
