import numpy as np
import pytest

from ssfmamba import diffcore as dc


def fd_gradient(f, x, step=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        g.reshape(-1)[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * step)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def test_add_node():
    tape = dc.Tape()
    a = tape.input("a", [1.0, 2.0])
    b = tape.input("b", [3.0, 4.0])
    tape.output("y", a + b)
    out = dc.forward_eval(tape, {"a": [1.0, 2.0], "b": [3.0, 4.0]})
    np.testing.assert_array_equal(out["y"], [4.0, 6.0])


def test_identity_tape():
    tape = dc.Tape()
    x = tape.input("x", np.arange(3.0))
    tape.output("y", x)
    out = dc.forward_eval(tape, {"x": [5.0, 6.0, 7.0]})
    np.testing.assert_array_equal(out["y"], [5.0, 6.0, 7.0])
    g = dc.backward(tape, np.ones(3), with_inputs=True)
    np.testing.assert_array_equal(g["x"], np.ones(3))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    tape = dc.Tape()
    tape.output("y", tape.input("a", A) @ tape.input("b", B))
    y = dc.forward_eval(tape, {"a": A, "b": B})["y"]
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                expected[i, j] += A[i, k] * B[k, j]
    np.testing.assert_allclose(y, expected, atol=1e-12, rtol=0)


def test_scale_gradient():
    tape = dc.Tape()
    x = tape.param("x", np.arange(4.0))
    tape.output("y", 3 * x)
    g = dc.backward(tape, np.ones(4))
    np.testing.assert_array_equal(g["x"], np.full(4, 3.0))


def test_softmax_cross_entropy_composite():
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=4)
    target = 2

    def build(z):
        tape = dc.Tape()
        z = tape.param("z", z)
        shifted = z - dc.max_nograd(z)
        loss = dc.log(dc.exp(shifted).sum()) - shifted[target]
        tape.output("loss", loss)
        return tape

    tape = build(z0)
    assert dc.finite_difference_check(tape, step=1e-5) < 1e-6
    # independent closed form: softmax - onehot
    p = np.exp(z0 - z0.max()) / np.exp(z0 - z0.max()).sum()
    g = dc.backward(tape, np.ones(()))["z"]
    np.testing.assert_allclose(g, p - np.eye(4)[target], atol=1e-12)


def test_fd_check_quadratic_and_constant():
    tape = dc.Tape()
    x = tape.input("x", [1.0, 2.0, 3.0])
    tape.output("f", (x * x).sum())
    assert dc.finite_difference_check(tape, step=1e-5) < 1e-8
    np.testing.assert_allclose(dc.backward(tape, np.ones(()), with_inputs=True)["x"], [2, 4, 6])

    tape = dc.Tape()
    x = tape.input("x", [1.0, 2.0])
    tape.output("f", (x * 0.0).sum() + 5.0)
    assert dc.finite_difference_check(tape, step=1e-5) == 0.0


def test_fd_check_rejects_vector_output():
    tape = dc.Tape()
    x = tape.input("x", [1.0, 2.0])
    tape.output("f", x * 2.0)
    with pytest.raises(dc.TapeError, match="not scalar"):
        dc.finite_difference_check(tape)


def _unary(fn, positive=False):
    def build(rng):
        x = rng.normal(size=(3, 4))
        if positive:
            x = np.abs(x) + 0.5
        return {"x": x}, lambda v: fn(v["x"])
    return build


def _binary(fn, shape_a=(3, 4), shape_b=(3, 4)):
    def build(rng):
        return ({"a": rng.normal(size=shape_a), "b": rng.normal(size=shape_b) + 3.0},
                lambda v: fn(v["a"], v["b"]))
    return build


PRIMITIVE_CASES = {
    "add": _binary(lambda a, b: a + b),
    "add_broadcast": _binary(lambda a, b: a + b, (3, 4), (1, 4)),
    "sub": _binary(lambda a, b: a - b, (3, 4), (4,)),
    "multiply": _binary(lambda a, b: a * b, (3, 1), (3, 4)),
    "divide": _binary(lambda a, b: a / b),
    "scale": _unary(lambda x: 2.5 * x),
    "power": _unary(lambda x: x ** -0.5, positive=True),
    "matmul": _binary(lambda a, b: a @ b, (3, 4), (4, 2)),
    "exp": _unary(dc.exp),
    "log": _unary(dc.log, positive=True),
    "tanh": _unary(dc.tanh),
    "sigmoid": _unary(dc.sigmoid),
    "silu": _unary(dc.silu),
    "gelu": _unary(dc.gelu),
    "leaky_relu": _unary(dc.leaky_relu),
    "softplus": _unary(dc.softplus),
    "sum": _unary(lambda x: x.sum(axis=1)),
    "mean": _unary(lambda x: x.mean(axis=0, keepdims=True)),
    "reshape": _unary(lambda x: x.reshape(2, 6)),
    "permute": _unary(lambda x: dc.permute(x.reshape(2, 3, 2), (2, 0, 1))),
    "gather": _unary(lambda x: dc.gather(x, [3, 0, 0, 2], axis=1)),
    "concat": _binary(lambda a, b: dc.concat([a, b], axis=0)),
    "slice": _unary(lambda x: x[1:, ::2]),
    "broadcast": _unary(lambda x: dc.broadcast_to(x[:, :1], (2, 3, 4))),
    "pad": _unary(lambda x: dc.pad(x, ((1, 0), (2, 1)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(7)
    values, fn = PRIMITIVE_CASES[name](rng)
    tape = dc.Tape()
    vs = {k: tape.input(k, v) for k, v in values.items()}
    out = fn(vs)
    weights = rng.normal(size=out.shape)
    tape.output("f", (out * weights).sum())
    assert dc.finite_difference_check(tape, step=1e-5) < 1e-5


def test_forward_eval_is_bitwise_repeatable():
    rng = np.random.default_rng(3)
    tape = dc.Tape()
    x = tape.input("x", rng.normal(size=(5, 5)))
    w = tape.param("w", rng.normal(size=(5, 5)))
    tape.output("y", dc.gelu(x @ w).sum(axis=0))
    a = dc.forward_eval(tape, {"x": rng.normal(size=(5, 5))})["y"].copy()
    b = dc.forward_eval(tape)["y"]
    assert np.array_equal(a, b)


def test_backward_is_linear_in_cotangent():
    rng = np.random.default_rng(4)
    tape = dc.Tape()
    x = tape.param("x", rng.normal(size=(4, 3)))
    w = tape.param("w", rng.normal(size=(3, 2)))
    y = tape.output("y", dc.tanh(x @ w))
    ca, cb = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    ga, gb = dc.backward(tape, ca), dc.backward(tape, cb)
    gab = dc.backward(tape, ca + cb)
    for k in ("x", "w"):
        np.testing.assert_allclose(gab[k], ga[k] + gb[k], atol=1e-12, rtol=0)
    assert y.shape == (4, 2)


def test_gradstore_keys_are_touched_trainables():
    tape = dc.Tape()
    a = tape.param("a", [1.0])
    tape.param("unused", [2.0])
    tape.param("frozen", [3.0], trainable=False)
    tape.output("y", a * tape.param("frozen", [3.0]))
    assert set(dc.backward(tape, np.ones(1))) == {"a"}


def test_shape_mismatch_names_the_node():
    tape = dc.Tape()
    a = tape.input("a", np.ones((2, 3)))
    with pytest.raises(dc.TapeError, match=r"node 0 \(matmul\)"):
        a @ np.ones((2, 3))


def test_replay_shape_mismatch_rejected():
    tape = dc.Tape()
    a = tape.input("a", np.ones(3))
    tape.output("y", a * 2.0)
    with pytest.raises(dc.TapeError, match="expected shape"):
        dc.forward_eval(tape, {"a": np.ones(4)})


def test_backward_before_forward_fails():
    tape = dc.Tape()
    a = tape.input("a", np.ones(3))
    tape.output("y", dc.exp(a))
    tape.clear_values()
    with pytest.raises(dc.TapeError, match="before forward"):
        dc.backward(tape, np.ones(3))
    dc.forward_eval(tape)
    assert set(dc.backward(tape, np.ones(3), with_inputs=True)) == {"a"}


def test_unknown_node_kind_fails():
    tape = dc.Tape()
    a = tape.input("a", np.ones(2))
    tape.output("y", dc.exp(a))
    tape.nodes[0].kind = "mystery"
    with pytest.raises(dc.TapeError, match="unknown primitive"):
        dc.backward(tape, np.ones(2))
    with pytest.raises(dc.TapeError, match="unknown primitive"):
        tape.apply("mystery", a)
