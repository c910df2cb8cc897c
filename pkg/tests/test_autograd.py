import numpy as np
import pytest

from cconv import autograd as ag
from cconv.autograd import Node, Parameter, Tape

TOL = 1e-6


def test_sum_grad_is_ones():
    x = Parameter(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        loss = ag.sum_all(x)
    np.testing.assert_array_equal(tape.backward(loss)[x], np.ones((2, 3)))


def test_square_grad():
    x = Parameter(np.array([1.0, 2.0, 3.0]))
    with Tape() as tape:
        loss = ag.sum_all(x * x)
    np.testing.assert_array_equal(tape.backward(loss)[x], [2.0, 4.0, 6.0])


def test_non_scalar_loss_rejected():
    x = Parameter(np.ones(3))
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ag.TapeError, match="scalar"):
        tape.backward(y)


def test_unregistered_op_rejected():
    with pytest.raises(ag.TapeError):
        ag.apply("no_such_op", Node(np.ones(2)))
    with pytest.raises(ag.TapeError):
        Tape().record("no_such_op", (), Node(np.ones(1)), None, {})


def test_out_of_order_record_is_tape_corruption():
    tape = Tape()
    a = Node(np.ones(1))
    b = Node(np.ones(1))
    tape.record("neg", (a,), b, None, {})
    with pytest.raises(ag.TapeError):
        tape.record("neg", (b,), a, None, {})


def test_cycle_detected_in_backward():
    x = Parameter(np.ones(1))
    with Tape() as tape:
        y = ag.neg(x)
    # corrupt: same output node recorded twice
    tape.records.append(tape.records[0])
    with pytest.raises(ag.TapeError, match="cycle"):
        tape.backward(y)


def test_no_tape_means_no_recording():
    x = Parameter(np.ones(3))
    y = x * 3.0
    assert not y.requires_grad


def test_zero_parameter_gradcheck_is_empty():
    assert ag.gradcheck(lambda: Node(np.ones(1)), []) == {}


def test_shared_parameter_accumulates():
    rng = np.random.default_rng(0)
    w = Parameter(rng.standard_normal((3, 3)))
    x = Node(rng.standard_normal((2, 3)))

    def loss():
        h = ag.tanh(ag.matmul(x, w))
        return ag.sum_all(ag.matmul(h, w) * ag.matmul(h, w))

    assert ag.check_params(loss, {"w": w})["w"] <= TOL


def test_backward_deterministic():
    rng = np.random.default_rng(3)
    w = Parameter(rng.standard_normal((4, 3, 3, 3)))
    x = Node(rng.standard_normal((2, 3, 6, 6)))
    out = []
    for _ in range(2):
        w.zero_grad()
        with Tape() as tape:
            loss = ag.sum_all(ag.tanh(ag.conv2d(x, w, padding=1)))
        out.append(tape.backward(loss)[w].tobytes())
    assert out[0] == out[1]


def _labels():
    return np.array([0, 2, 1, 2])


# op name -> (build_fn, shapes); build_fn returns a scalar Node
OP_CASES = {
    "add": (lambda a, b: ag.sum_all(ag.tanh(a + b)), [(3, 4), (1, 4)]),
    "neg": (lambda a: ag.sum_all(ag.tanh(-a)), [(5,)]),
    "mul": (lambda a, b: ag.sum_all(a * b), [(2, 3), (2, 3)]),
    "scale": (lambda a: ag.sum_all(ag.tanh(ag.scale(a, -0.7))), [(4,)]),
    "add_scalar": (lambda a: ag.sum_all(ag.tanh(ag.add_scalar(a, 0.3))), [(4,)]),
    "relu": (lambda a: ag.sum_all(ag.relu(a) * ag.relu(a)), [(3, 5)]),
    "tanh": (lambda a: ag.sum_all(ag.tanh(a)), [(6,)]),
    "sum": (lambda a: ag.sum_all(a * a), [(2, 2, 2)]),
    "mean": (lambda a: ag.mean(ag.tanh(a)), [(3, 3)]),
    "sum_axes": (lambda a: ag.sum_all(ag.tanh(ag.sum_axes(a, (1, 3)))), [(2, 3, 2, 2)]),
    "reshape": (lambda a, b: ag.sum_all(ag.reshape(a, (3, 2)) * b), [(2, 3), (3, 2)]),
    "concat": (lambda a, b: ag.sum_all(ag.tanh(ag.concat([a, b], axis=1))), [(2, 3), (2, 2)]),
    "take": (lambda a: ag.sum_all(ag.tanh(ag.take(a, _labels()))), [(3, 4)]),
    "scatter_rows": (lambda a, b: ag.sum_all(ag.tanh(ag.scatter_rows([a, b], [[0, 3], [2, 1]], 4))), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: ag.sum_all(ag.tanh(ag.matmul(a, b))), [(3, 4), (4, 2)]),
    "conv2d": (lambda x, w, b: ag.sum_all(ag.tanh(ag.conv2d(x, w, b, padding=1))), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
    "avg_pool2": (lambda x: ag.sum_all(ag.tanh(ag.avg_pool2(x))), [(2, 2, 4, 4)]),
    "upsample2": (lambda x: ag.sum_all(ag.tanh(ag.upsample2(x))), [(2, 2, 2, 3)]),
    "batch_normalize": (lambda x, t: ag.sum_all(ag.tanh(ag.batch_normalize(x, 1e-5)) * t), [(3, 2, 3, 3), (3, 2, 3, 3)]),
    "channel_affine": (lambda x, s, b: ag.sum_all(ag.tanh(ag.channel_affine(x, s, b))), [(2, 3, 2, 2), (2, 3), (3,)]),
    "condition_weights": (lambda w, g, b, x: ag.sum_all(ag.tanh(ag.conv2d(x, ag.condition_weights(w, g, b, 1), padding=1))),
                          [(4, 3, 3, 3), (2, 4), (2, 3), (2, 3, 4, 4)]),
    "multiplicative_weights": (lambda w, g, b: ag.sum_all(ag.tanh(ag.multiplicative_weights(w, g, b, 0))),
                               [(4, 3, 3, 3), (2, 4), (2, 3)]),
    "spectral_normalize": (lambda w: ag.sum_all(ag.tanh(ag.spectral_normalize(w, _U, _V))), [(3, 2, 3, 3)]),
    "softmax_xent": (lambda z: ag.softmax_xent(z, [0, 2, 1]), [(3, 4)]),
}
_U = np.array([0.6, 0.0, 0.8])
_V = np.linspace(-1, 1, 18) / np.linalg.norm(np.linspace(-1, 1, 18))


def test_every_registered_op_has_a_case():
    assert set(ag.registered_ops()) == set(OP_CASES)


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradient_vs_finite_differences(op):
    build, shapes = OP_CASES[op]
    report = ag.gradcheck(build, shapes, seed=7)
    assert len(report) == len(shapes)
    assert max(report.values()) <= TOL, report


def test_cconv_beta_gradient_is_divided_by_c_out():
    # fused forward includes beta / C_out, so d/dbeta is the channel sum over filters / C_out
    rng = np.random.default_rng(5)
    w = Parameter(rng.standard_normal((4, 2, 1, 1)))
    g = Parameter(np.ones((1, 4)))
    b = Parameter(np.zeros((1, 2)))
    with Tape() as tape:
        loss = ag.sum_all(ag.condition_weights(w, g, b, 0))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[b], [[1.0, 1.0]])  # 4 filters * 1 / 4
    np.testing.assert_allclose(grads[g], w.value.sum(axis=(1, 2, 3))[None])


def test_gradcheck_rejects_nonfinite_loss():
    from cconv.tensor import NonFiniteError
    with pytest.raises(NonFiniteError):
        ag.gradcheck(lambda a: Node(np.array([np.nan])) + a, [(1,)])
