import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from losscal import diffcore
from losscal.diffcore import Tape, TapeError, grad_check


def finite(shape, lo=-3.0, hi=3.0):
    return arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, allow_infinity=False))


def test_identity_forward():
    tape = Tape()
    tape.set_output(tape.input("x"))
    np.testing.assert_array_equal(tape.forward({"x": [1.0, 2.0, 3.0]}), [1, 2, 3])


def test_relu_forward():
    tape = Tape()
    tape.relu(tape.input("x"))
    np.testing.assert_array_equal(tape.forward({"x": [-1.0, 0.0, 2.0]}), [0, 0, 2])


def test_affine_then_relu_hand_values():
    # W acts as W @ x on a column; the tape stores the transposed (d, h) layout
    w = np.array([[1.0, 1.0], [0.0, 1.0]])
    tape = Tape()
    pre = tape.affine(tape.input("x"), tape.param("W"), tape.param("b"))
    tape.relu(pre)
    out = tape.forward({"x": [[1.0, -2.0]], "W": w.T, "b": np.zeros(2)})
    np.testing.assert_array_equal(tape.value(pre), [[-1.0, -2.0]])
    np.testing.assert_array_equal(out, [[0.0, 0.0]])


def test_square_gradient():
    tape = Tape()
    x = tape.input("x")
    tape.sum(tape.mul(x, x))
    tape.forward({"x": np.array([3.0])})
    assert tape.backward(1.0)["x"][0] == 6.0


def test_relu_subgradient_convention():
    tape = Tape()
    tape.sum(tape.relu(tape.input("x")))
    tape.forward({"x": np.array([-1.0, 2.0])})
    np.testing.assert_array_equal(tape.backward()["x"], [0.0, 1.0])
    tape.forward({"x": np.array([0.0])})
    assert tape.backward()["x"][0] == 0.0


def test_log_softmax_max_gradient():
    tape = Tape()
    lsm = tape.log_softmax(tape.input("z"))
    tape.sum(tape.pick(lsm, tape.const("k")))
    bind = {"z": np.array([[2.0, 0.0]]), "k": np.array([0.0])}
    tape.forward(bind)
    g = tape.backward()["z"][0]
    p1 = 1.0 / (1.0 + np.exp(2.0))
    np.testing.assert_allclose(g, [p1, -p1], rtol=1e-12)
    np.testing.assert_allclose(g, [0.1192, -0.1192], atol=5e-5)
    h = 1e-6
    fd = []
    for j in range(2):
        up, dn = bind["z"].copy(), bind["z"].copy()
        up[0, j] += h
        dn[0, j] -= h
        fd.append((tape.forward({**bind, "z": up}) - tape.forward({**bind, "z": dn})) / (2 * h))
    np.testing.assert_allclose(g, fd, atol=1e-8)


def test_unbound_leaf_fails():
    tape = Tape()
    tape.relu(tape.input("x"))
    with pytest.raises(TapeError, match="'x' is not bound"):
        tape.forward({})


def test_shape_mismatch_names_node():
    tape = Tape()
    tape.affine(tape.input("x"), tape.param("W"), tape.param("b"), name="layer1")
    with pytest.raises(TapeError, match="affine 'layer1'"):
        tape.forward({"x": np.ones((2, 3)), "W": np.ones((4, 2)), "b": np.zeros(2)})


def test_backward_before_forward_fails():
    tape = Tape()
    tape.sum(tape.input("x"))
    with pytest.raises(TapeError, match="before forward"):
        tape.backward()


def test_backward_needs_scalar():
    tape = Tape()
    tape.relu(tape.input("x"))
    tape.forward({"x": np.ones(3)})
    with pytest.raises(TapeError, match="scalar"):
        tape.backward()


def test_unknown_op_and_dangling_operand():
    tape = Tape()
    with pytest.raises(TapeError):
        tape.op("conv", 0)
    with pytest.raises(TapeError):
        tape.relu(5)


def test_gradients_cover_inputs_not_consts():
    tape = Tape()
    tape.sum(tape.mul(tape.input("x"), tape.const("c")))
    tape.forward({"x": np.ones(2), "c": np.array([2.0, 3.0])})
    grads = tape.backward()
    assert set(grads) == {"x"}
    np.testing.assert_array_equal(grads["x"], [2.0, 3.0])


def test_detach_blocks_gradient():
    tape = Tape()
    x = tape.input("x")
    tape.sum(tape.mul(x, tape.detach(x)))
    tape.forward({"x": np.array([3.0])})
    assert tape.backward()["x"][0] == 3.0


def test_shared_node_accumulates():
    tape = Tape()
    x = tape.input("x")
    y = tape.relu(x)
    tape.sum(tape.add(y, tape.scale(y, c=2.0)))
    tape.forward({"x": np.array([1.0, -1.0])})
    np.testing.assert_array_equal(tape.backward()["x"], [3.0, 0.0])


def _linear_tape():
    tape = Tape()
    tape.sum(tape.affine(tape.input("x"), tape.param("W"), tape.param("b")))
    return tape


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(0)
    bind = {"x": rng.normal(size=(3, 4)), "W": rng.normal(size=(4, 2)), "b": rng.normal(size=2)}
    assert grad_check(_linear_tape(), bind) < 1e-9


def test_grad_check_relu_away_from_kinks():
    rng = np.random.default_rng(1)
    x = rng.uniform(1e-3, 2.0, size=(5, 3)) * rng.choice([-1, 1], size=(5, 3))
    tape = Tape()
    tape.sum(tape.square(tape.relu(tape.input("x"))))
    tape.forward({"x": x})
    assert tape.kink_distance() >= 1e-3
    assert grad_check(tape, {"x": x}) < 1e-6


def test_grad_check_full_joint_model():
    from losscal.pipeline import gradient_self_check

    rows = gradient_self_check(seeds=[0], aux_kinds=("contrastive",))
    leaves = {leaf for _, _, leaf, _ in rows}
    assert "x" in leaves and "est.W" in leaves and "trunk.0.W" in leaves
    assert max(err for *_, err in rows) < 1e-5


def test_grad_check_catches_wrong_rule(monkeypatch):
    fwd, _ = diffcore._RULES["square"]
    monkeypatch.setitem(diffcore._RULES, "square", (fwd, lambda g, v, o, a: (3.0 * g * v[0],)))
    tape = Tape()
    tape.sum(tape.square(tape.input("x")))
    assert grad_check(tape, {"x": np.array([0.5, -1.5])}) > 0.1


def test_grad_check_per_leaf_report():
    rng = np.random.default_rng(2)
    bind = {"x": rng.normal(size=(2, 3)), "W": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
    worst, per_leaf = grad_check(_linear_tape(), bind, per_leaf=True)
    assert set(per_leaf) == {"x", "W", "b"}
    assert worst == max(per_leaf.values())


@pytest.mark.parametrize("op", ["square", "neg", "log_softmax", "mean"])
@settings(max_examples=25, deadline=None)
@given(x=finite((3, 4)))
def test_primitive_gradients(op, x):
    tape = Tape()
    out = tape.op(op, tape.input("x"))
    tape.sum(tape.mul(out, tape.const("w")))
    w = np.linspace(-1.0, 2.0, 12).reshape(3, 4) if op not in ("mean",) else np.array(1.5)
    assert grad_check(tape, {"x": x, "w": w}) < 1e-5


@settings(max_examples=25, deadline=None)
@given(a=finite((3, 2)), b=finite((1, 2)), c=finite((3, 3)))
def test_binary_and_structural_gradients(a, b, c):
    tape = Tape()
    xa, xb, xc = tape.input("a"), tape.input("b"), tape.input("c")
    prod = tape.mul(tape.add(xa, xb), tape.sub(xb, xa))
    joined = tape.concat(prod, xc)
    picked = tape.pick(joined, tape.const("k"))
    tape.sum(tape.square(tape.take(picked, tape.const("idx"))))
    bind = {"a": a, "b": b, "c": c, "k": np.array([0.0, 3.0, 4.0]), "idx": np.array([2.0, 0.0, 2.0])}
    assert grad_check(tape, bind) < 1e-5


@settings(max_examples=30, deadline=None)
@given(x=finite((2, 3)), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_backward_is_linear(x, alpha, beta):
    def grad(build):
        tape = Tape()
        build(tape, tape.input("x"))
        tape.forward({"x": x})
        return tape.backward()["x"]

    f = lambda t, v: t.sum(t.square(v))
    g = lambda t, v: t.sum(t.log_softmax(v))
    combo = lambda t, v: t.add(t.scale(f(t, v), c=alpha), t.scale(g(t, v), c=beta))
    np.testing.assert_allclose(grad(combo), alpha * grad(f) + beta * grad(g), rtol=1e-12, atol=1e-12)


def test_forward_backward_deterministic():
    rng = np.random.default_rng(3)
    bind = {"x": rng.normal(size=(4, 3)), "W": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
    tape = _linear_tape()
    results = []
    for _ in range(2):
        out = tape.forward(bind)
        results.append((out.tobytes(), {k: v.tobytes() for k, v in tape.backward().items()}))
    assert results[0] == results[1]


def test_log_softmax_stable_for_extreme_logits():
    tape = Tape()
    tape.log_softmax(tape.input("z"))
    out = tape.forward({"z": np.array([[500.0, -500.0, 0.0]])})
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[0, 0], 0.0, atol=1e-300)


def test_module_level_helpers():
    tape = Tape()
    tape.sum(tape.square(tape.input("x")))
    assert diffcore.forward(tape, {"x": np.array([2.0])}) == 4.0
    assert diffcore.backward(tape, 2.0)["x"][0] == 8.0
