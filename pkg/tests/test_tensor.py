import numpy as np
import pytest

from momlm.errors import ContractError, DimensionError
from momlm.gradcheck import check_gradients
from momlm.tensor import (
    Rng,
    Tensor,
    concat,
    cross_entropy,
    default_dtype,
    embedding,
    gelu,
    get_default_dtype,
    layernorm,
    no_grad,
    parameter,
    softmax_lastdim,
    take_along_lastdim,
)

TOLERANCE = 1e-6


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, dtype=np.float64)


def positive(rng, *shape):
    return Tensor(rng.uniform(0.5, 2.0, size=shape), dtype=np.float64)


# each case builds (fn, inputs) from a numpy generator
GRADIENT_CASES = {
    "add_broadcast": lambda r: (lambda a, b: a + b, [rand(r, 3, 4), rand(r, 4)]),
    "sub_broadcast": lambda r: (lambda a, b: a - b, [rand(r, 2, 3), rand(r, 2, 1)]),
    "mul": lambda r: (lambda a, b: a * b, [rand(r, 3, 4), rand(r, 3, 4)]),
    "div": lambda r: (lambda a, b: a / b, [rand(r, 3, 2), positive(r, 3, 2)]),
    "neg_scalar_ops": lambda r: (lambda a: 2.0 - (-a) * 3.0, [rand(r, 5)]),
    "exp": lambda r: (lambda a: a.exp(), [rand(r, 2, 3, scale=0.5)]),
    "log": lambda r: (lambda a: a.log(), [positive(r, 4)]),
    "tanh": lambda r: (lambda a: a.tanh(), [rand(r, 3, 3)]),
    "sigmoid": lambda r: (lambda a: a.sigmoid(), [rand(r, 3, 3)]),
    "gelu": lambda r: (gelu, [rand(r, 4, 3)]),
    "matmul": lambda r: (lambda a, b: a @ b, [rand(r, 3, 4), rand(r, 4, 2)]),
    "matmul_batched": lambda r: (
        lambda a, b: a @ b,
        [rand(r, 2, 3, 4), rand(r, 2, 4, 2)],
    ),
    "sum_axis": lambda r: (lambda a: a.sum(axis=1), [rand(r, 3, 4)]),
    "mean_keepdims": lambda r: (lambda a: a.mean(axis=0, keepdims=True), [rand(r, 3, 4)]),
    "reshape_transpose": lambda r: (
        lambda a: a.reshape(2, 6).transpose(1, 0),
        [rand(r, 3, 4)],
    ),
    "getitem_slice": lambda r: (lambda a: a[1:, ::2], [rand(r, 4, 5)]),
    "getitem_repeat": lambda r: (lambda a: a[np.array([0, 2, 0])], [rand(r, 3, 2)]),
    "concat": lambda r: (
        lambda a, b: concat([a, b], axis=1),
        [rand(r, 2, 3), rand(r, 2, 2)],
    ),
    "take_along_lastdim": lambda r: (
        lambda a: take_along_lastdim(a, np.array([[2, 0], [1, 1], [0, 3]])),
        [rand(r, 3, 4)],
    ),
    "embedding": lambda r: (
        lambda w: embedding(w, np.array([1, 3, 1, 0])),
        [rand(r, 5, 3)],
    ),
    "softmax": lambda r: (softmax_lastdim, [rand(r, 3, 5)]),
    "softmax_causal": lambda r: (
        lambda a: softmax_lastdim(
            a, np.triu(np.full((4, 4), -np.inf), k=1)
        ),
        [rand(r, 4, 4)],
    ),
    "layernorm": lambda r: (
        lambda x, g, b: layernorm(x, g, b, 1e-5),
        [rand(r, 3, 6), rand(r, 6), rand(r, 6)],
    ),
    "cross_entropy": lambda r: (
        lambda logits: cross_entropy(logits, np.array([0, 4, 2])),
        [rand(r, 3, 5)],
    ),
}


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_gradients(name, seed):
    rng = np.random.default_rng(seed)
    fn, inputs = GRADIENT_CASES[name](rng)
    assert check_gradients(fn, inputs) < TOLERANCE


class TestBackward:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_leaf_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).sum().backward()
        (x * 3.0).sum().backward()
        assert np.allclose(x.grad, [2.0 + 3.0, 4.0 + 3.0])

    def test_shared_subexpression(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * x
        (y + y).backward()
        assert x.grad == pytest.approx(12.0)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.is_leaf

    def test_constant_inputs_receive_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.ones(2))
        (x * c).sum().backward()
        assert c.grad is None

    def test_deep_graph(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.backward()
        assert x.grad == pytest.approx(1.0)


class TestOps:
    def test_matmul_example(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
        assert (a @ b).data.tolist() == [[19.0, 22.0], [43.0, 50.0]]

    def test_layernorm_example(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0]]))
        out = layernorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
        assert np.allclose(out.data, [[-1.22474, 0.0, 1.22474]], atol=1e-4)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_matmul_dtype_mismatch(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32))
        b = Tensor(np.ones((2, 2), dtype=np.float64))
        with pytest.raises(ContractError):
            a @ b

    def test_softmax_sums_to_one(self):
        x = Tensor(np.random.default_rng(0).normal(size=(6, 7)), dtype=np.float64)
        assert np.allclose(softmax_lastdim(x).data.sum(axis=-1), 1.0)

    def test_softmax_fully_masked_row(self):
        mask = np.array([[0.0, -np.inf], [-np.inf, -np.inf]])
        with pytest.raises(ContractError):
            softmax_lastdim(Tensor(np.zeros((2, 2))), mask)

    def test_layernorm_constant_row(self):
        x = Tensor(np.full((2, 4), 3.0), dtype=np.float64)
        gain, bias = Tensor(np.ones(4)), Tensor(np.full(4, 0.5))
        assert np.allclose(layernorm(x, gain, bias, 1e-5).data, 0.5)

    def test_layernorm_bad_eps(self):
        with pytest.raises(ContractError):
            layernorm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)

    def test_layernorm_empty(self):
        with pytest.raises(DimensionError):
            layernorm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)), Tensor(np.ones(0)), 1e-5)

    def test_embedding_out_of_range(self):
        with pytest.raises(ContractError):
            embedding(Tensor(np.ones((4, 2))), np.array([0, 4]))

    def test_cross_entropy_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((3, 8))), np.array([0, 1, 7]))
        assert loss.item() == pytest.approx(np.log(8), rel=1e-6)

    def test_cross_entropy_target_range(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestDtype:
    def test_default_is_float32(self):
        assert get_default_dtype() == np.float32
        assert Tensor([1, 2]).dtype == np.float32

    def test_context_restores(self):
        with default_dtype("float64"):
            assert parameter(np.ones(2, dtype=np.float32)).dtype == np.float64
        assert get_default_dtype() == np.float32

    def test_unknown_dtype(self):
        with pytest.raises(ContractError):
            with default_dtype("float16"):
                pass


class TestRng:
    def test_reproducible(self):
        assert np.array_equal(Rng(7).normal((3, 3), 1.0), Rng(7).normal((3, 3), 1.0))

    def test_spawn_is_independent_and_stable(self):
        a, b = Rng(7).spawn(1), Rng(7).spawn(2)
        assert a.seed == Rng(7).spawn(1).seed
        assert a.seed != b.seed

    def test_state_round_trip(self):
        rng = Rng(3)
        state = rng.state
        first = rng.uniform((4,), 1.0)
        rng.set_state(state)
        assert np.array_equal(rng.uniform((4,), 1.0), first)

    def test_seed_range(self):
        with pytest.raises(ContractError):
            Rng(-1)
