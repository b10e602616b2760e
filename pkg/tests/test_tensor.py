import numpy as np
import pytest

from aligncl import tensor as T
from aligncl.gradcheck import grad_check
from aligncl.tensor import NonFiniteError, Tape, TapeError, Tensor


def _weights(shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


# Each case maps a point to a scalar through one primitive, weighted by a fixed
# random array so that every output coordinate matters.
def _case(name, rng):
    if name == "matmul":
        b = rng.normal(size=(4, 2))
        return rng.normal(size=(3, 4)), lambda x: T.matmul(x, Tensor(b)), (3, 2)
    if name == "matmul_right":
        a = rng.normal(size=(3, 4))
        return rng.normal(size=(4, 2)), lambda x: T.matmul(Tensor(a), x), (3, 2)
    if name == "matmul_batched":
        b = rng.normal(size=(2, 4, 3))
        return rng.normal(size=(2, 3, 4)), lambda x: T.matmul(x, Tensor(b)), (2, 3, 3)
    if name == "matmul_3d_2d":
        b = rng.normal(size=(4, 2))
        return rng.normal(size=(2, 3, 4)), lambda x: T.matmul(x, Tensor(b)), (2, 3, 2)
    if name == "add":
        c = rng.normal(size=(3, 4))
        return rng.normal(size=(3, 4)), lambda x: T.add(x, Tensor(c)), (3, 4)
    if name == "add_bias":
        a = rng.normal(size=(3, 4))
        return rng.normal(size=4), lambda x: T.add(Tensor(a), x), (3, 4)
    if name == "sub":
        c = rng.normal(size=(3, 4))
        return rng.normal(size=(3, 4)), lambda x: T.sub(Tensor(c), x), (3, 4)
    if name == "mul":
        c = rng.normal(size=(3, 4))
        return rng.normal(size=(3, 4)), lambda x: T.mul(x, Tensor(c)), (3, 4)
    if name == "mul_self":
        return rng.normal(size=(3, 4)), lambda x: T.mul(x, x), (3, 4)
    if name == "scale":
        return rng.normal(size=(5,)), lambda x: T.scale(x, -2.5), (5,)
    if name == "tanh":
        return rng.normal(size=(5,)), T.tanh, (5,)
    if name == "exp":
        return rng.normal(size=(5,)), T.exp, (5,)
    if name == "log":
        return rng.uniform(0.5, 3.0, size=(5,)), T.log, (5,)
    if name == "gelu":
        return rng.normal(size=(5,)), T.gelu, (5,)
    if name == "softmax":
        return rng.normal(size=(3, 4)), T.softmax, (3, 4)
    if name == "log_softmax":
        return rng.normal(size=(3, 4)), T.log_softmax, (3, 4)
    if name == "mean":
        return rng.normal(size=(3, 4)), lambda x: T.mean(x, axis=1), (3,)
    if name == "mean_all":
        return rng.normal(size=(3, 4)), T.mean, ()
    if name == "sum":
        return rng.normal(size=(3, 4)), lambda x: T.sum(x, axis=0), (4,)
    if name == "concat":
        c = rng.normal(size=(2, 4))
        return rng.normal(size=(3, 4)), lambda x: T.concat([x, Tensor(c), x], axis=0), (8, 4)
    if name == "slice":
        return rng.normal(size=(4, 5)), lambda x: T.slice_(x, (slice(1, 3), slice(None, None, 2))), (2, 3)
    if name == "slice_fancy":
        return rng.normal(size=(4, 5)), lambda x: T.slice_(x, ([0, 2, 0], [1, 1, 1])), (3,)
    if name == "transpose":
        return rng.normal(size=(3, 4)), T.transpose, (4, 3)
    if name == "l2_normalize":
        return rng.normal(size=(3, 4)), T.l2_normalize, (3, 4)
    if name == "dropout":
        seed = int(rng.integers(1 << 30))
        return (rng.normal(size=(3, 4)),
                lambda x: T.dropout(x, 0.3, np.random.default_rng(seed), True), (3, 4))
    if name == "layer_norm":
        g, b = rng.normal(size=4), rng.normal(size=4)
        return rng.normal(size=(3, 4)), lambda x: T.layer_norm(x, Tensor(g), Tensor(b)), (3, 4)
    if name == "layer_norm_gamma":
        x0, b = rng.normal(size=(3, 4)), rng.normal(size=4)
        return rng.normal(size=4), lambda g: T.layer_norm(Tensor(x0), g, Tensor(b)), (3, 4)
    if name == "embedding":
        ids = rng.integers(0, 5, size=(2, 3))
        return rng.normal(size=(5, 4)), lambda x: T.embedding(x, ids), (2, 3, 4)
    if name == "swapaxes":
        return rng.normal(size=(2, 3, 4)), lambda x: T.swapaxes(x, 1, 2), (2, 4, 3)
    if name == "reshape":
        return rng.normal(size=(2, 6)), lambda x: T.reshape(x, (3, 4)), (3, 4)
    raise KeyError(name)


CASES = ["matmul", "matmul_right", "matmul_batched", "matmul_3d_2d", "add", "add_bias", "sub",
         "mul", "mul_self", "scale", "tanh", "exp", "log", "gelu", "softmax", "log_softmax",
         "mean", "mean_all", "sum", "concat", "slice", "slice_fancy", "transpose", "l2_normalize",
         "dropout", "layer_norm", "layer_norm_gamma", "embedding", "swapaxes", "reshape"]


def primitive_grad_errors(name, n_points=10, seed=0):
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_points):
        point, op, out_shape = _case(name, rng)
        w = rng.normal(size=out_shape)
        res = grad_check(lambda x: T.sum(T.mul_const(op(x), w)), point, step=1e-5, tol=1e-4)
        errors.append(res.max_error)
    return errors


@pytest.mark.parametrize("name", CASES)
def test_primitive_gradients_match_finite_differences(name):
    assert max(primitive_grad_errors(name)) <= 1e-4


def test_every_required_primitive_is_registered():
    required = {"matmul", "add", "sub", "mul", "scale", "tanh", "exp", "log", "softmax",
                "log_softmax", "mean", "sum", "concat", "slice", "transpose", "l2_normalize",
                "dropout", "layer_norm", "embedding"}
    assert required <= set(T.PRIMITIVES)


def test_forward_examples():
    assert T.tanh(Tensor([0.0])).data.tolist() == [0.0]
    np.testing.assert_allclose(T.softmax(Tensor([1.0, 1.0, 1.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=0, atol=1e-15)


def test_backward_examples():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        tape.backward(T.sum(w))
    assert w.grad.tolist() == [1.0, 1.0, 1.0]

    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.scale(T.sum(T.mul(w, w)), 0.5)
        tape.backward(loss)
    assert w.grad.tolist() == [1.0, 2.0]


def test_backward_seeds_loss_gradient_with_one():
    w = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(w)
        tape.backward(loss)
    assert w.grad.tolist() == [1.0]


def test_double_backward_without_reset_is_an_error():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = T.sum(T.mul(w, w))
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)
        tape.reset()
        loss = T.sum(T.mul(w, w))
        tape.backward(loss)
    assert w.grad.tolist() == [2.0, 4.0]


def test_retain_graph_overwrites_instead_of_accumulating():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        a = T.sum(T.mul(w, w))
        b = T.sum(w)
        tape.backward(a, retain_graph=True)
        np.testing.assert_array_equal(w.grad, [2.0, 4.0])
        tape.backward(b)
        np.testing.assert_array_equal(w.grad, [1.0, 1.0])


def test_unreachable_leaf_gets_zero_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    v = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        T.sum(v)
        loss = T.sum(w)
        tape.backward(loss)
    assert v.grad.tolist() == [0.0]


def test_non_scalar_and_empty_tape_errors():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.tanh(w)
        with pytest.raises(TapeError):
            tape.backward(y)
    with pytest.raises(TapeError):
        Tape().backward(Tensor(1.0))


def test_tape_order_is_topological():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        T.sum(T.tanh(T.matmul(w, w)))
    produced = set()
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and t is not w:
                assert t.node_id in produced
        produced.add(rec.output.node_id)


def test_no_grad_suspends_recording():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        with T.no_grad():
            T.tanh(w)
        assert len(tape) == 0


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        T.transpose(Tensor(np.ones((2, 3, 4))))


def test_non_finite_outputs_raise():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_l2_normalize_zero_vector_is_an_error():
    with pytest.raises(ValueError):
        T.l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_softmax_rows_sum_to_one_and_normalize_gives_unit_norm():
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = rng.normal(scale=5.0, size=(6, 7))
        assert np.max(np.abs(T.softmax(Tensor(x)).data.sum(axis=-1) - 1.0)) <= 1e-12
        assert np.max(np.abs(np.linalg.norm(T.l2_normalize(Tensor(x)).data, axis=-1) - 1.0)) <= 1e-12


def test_dropout_is_identity_in_eval_and_inverted_in_train():
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.5, None, train=False) is x
    y = T.dropout(x, 0.5, np.random.default_rng(0), train=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        T.dropout(x, 0.5, None, train=True)


def test_seeded_forward_backward_is_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        w = Tensor(np.random.default_rng(3).normal(size=(4, 4)), requires_grad=True)
        with Tape() as tape:
            h = T.dropout(T.gelu(T.matmul(w, w)), 0.2, rng, True)
            loss = T.sum(T.log_softmax(h))
            tape.backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_operator_sugar_matches_functions():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 5.0]])
    assert (a + b).data.tolist() == [[4.0, 7.0]]
    assert (a - b).data.tolist() == [[-2.0, -3.0]]
    assert (a * b).data.tolist() == [[3.0, 10.0]]
    assert (2.0 * a).data.tolist() == [[2.0, 4.0]]
    assert (-a).data.tolist() == [[-1.0, -2.0]]
    assert (a @ T.transpose(b)).data.tolist() == [[13.0]]
    assert a[0, 1].data == 2.0
