import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selnet import autodiff as ad
from selnet.autodiff import Tensor
from selnet.gradcheck import check_function, check_operators, numeric_gradient


def param(x):
    return Tensor(x, requires_grad=True)


class TestForward:
    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(ad.softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_stop_gradient_forward_is_identity(self):
        x = Tensor([1.5, -2.0])
        np.testing.assert_array_equal(ad.stop_gradient(x).data, x.data)

    def test_sigmoid_stable_at_extremes(self):
        out = ad.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
        assert np.all(np.isfinite(out))
        assert out[1] == 0.5

    def test_log_clamps(self):
        assert ad.log(Tensor([0.0])).data[0] == np.log(1e-12)

    def test_div_clamps_denominator(self):
        assert np.isfinite(ad.div(Tensor([1.0]), Tensor([0.0])).data).all()

    @pytest.mark.parametrize(
        "op, a, b",
        [
            (ad.matmul, (2, 3), (2, 3)),
            (ad.add, (2, 3), (3, 2)),
            (ad.mul, (4,), (5,)),
            (ad.bias_add, (2, 3), (2,)),
        ],
    )
    def test_shape_mismatch_names_op_and_shapes(self, op, a, b):
        with pytest.raises(ad.ShapeError) as err:
            op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
        msg = str(err.value)
        assert op.__name__ in msg and str(a) in msg and str(b) in msg


class TestBackward:
    def test_square_sum(self):
        x = param([3.0])
        with ad.Tape():
            loss = ad.sum(x * x)
            grads = ad.backward(loss)
        np.testing.assert_array_equal(grads[x], [6.0])

    def test_loss_wrt_itself(self):
        x = param(2.0)
        with ad.Tape() as tape:
            pass
        assert tape.gradient(x)[x] == 1.0

    def test_non_scalar_rejected(self):
        x = param([1.0, 2.0])
        with ad.Tape() as tape:
            y = ad.square(x)
        with pytest.raises(ad.ShapeError):
            tape.gradient(y)

    def test_stop_gradient_path_is_zero(self):
        z = param([0.3, 0.7])
        with ad.Tape() as tape:
            loss = ad.sum(ad.stop_gradient(ad.exp(z)) * 2.0)
        grads = tape.gradient(loss, [z])
        np.testing.assert_array_equal(grads[z], [0.0, 0.0])

    def test_unused_parameter_gets_zero_gradient(self):
        a, b = param([1.0]), param([[1.0, 2.0]])
        with ad.Tape() as tape:
            loss = ad.sum(a * 2.0)
        grads = tape.gradient(loss, [a, b])
        assert grads[b].shape == b.shape and not grads[b].any()

    def test_fan_out_accumulates(self):
        x = param([2.0])
        with ad.Tape() as tape:
            loss = ad.sum(x * x + x * 3.0)
        np.testing.assert_allclose(tape.gradient(loss)[x], [7.0])

    def test_gradient_shapes_match_parameters(self):
        rng = np.random.default_rng(0)
        W, b = param(rng.normal(size=(4, 3))), param(np.zeros(3))
        x = Tensor(rng.normal(size=(5, 4)))
        with ad.Tape() as tape:
            loss = ad.mean(ad.relu(ad.bias_add(x @ W, b)))
        grads = tape.gradient(loss)
        assert grads[W].shape == W.shape and grads[b].shape == b.shape

    def test_sigmoid_dense_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x, W, b = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, 2)
        res = check_function("dense", lambda x, W, b: ad.mean(ad.sigmoid(ad.bias_add(x @ W, b))), [x, W, b])
        assert res.passed and res.max_rel_error < 1e-4

    def test_no_tape_no_record(self):
        x = param([1.0])
        y = ad.square(x)
        assert not y.requires_grad
        with pytest.raises(RuntimeError):
            ad.backward(ad.sum(y))

    def test_tape_is_topologically_ordered(self):
        x = param([1.0, 2.0])
        with ad.Tape() as tape:
            loss = ad.sum(ad.exp(ad.square(x)))
        produced = set()
        for rec in tape.records:
            for inp in rec.inputs:
                assert not inp.requires_grad or inp is x or id(inp) in produced
            produced.add(id(rec.output))
        assert tape.records[-1].output is loss


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_operator_against_finite_differences(seed):
    for res in check_operators(seed):
        assert res.passed, res.line()


def test_corrupted_rule_is_reported(monkeypatch):
    monkeypatch.setitem(ad.BACKWARD, "sigmoid", lambda g, rec: (g,))
    failed = [r.name for r in check_operators(0) if not r.passed]
    assert "sigmoid" in failed


def test_deterministic():
    def run():
        rng = np.random.default_rng(3)
        W = param(rng.normal(size=(3, 3)))
        x = Tensor(rng.normal(size=(4, 3)))
        with ad.Tape() as tape:
            loss = ad.mean(ad.softmax(x @ W))
        return loss.data.copy(), tape.gradient(loss)[W]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear_in_the_loss(seed, a, b):
    rng = np.random.default_rng(seed)
    W = param(rng.uniform(-2, 2, (3, 2)))
    x = Tensor(rng.uniform(-2, 2, (4, 3)))
    with ad.Tape() as tape:
        h = x @ W
        l1 = ad.mean(ad.sigmoid(h))
        l2 = ad.sum(ad.square(h))
        combo = ad.scale(l1, a) + ad.scale(l2, b)
    g1 = tape.gradient(l1)[W]
    g2 = tape.gradient(l2)[W]
    gc = tape.gradient(combo)[W]
    np.testing.assert_allclose(gc, a * g1 + b * g2, rtol=0, atol=1e-10)


def test_numeric_gradient_oracle_on_closed_form():
    x = np.array([0.5, -1.0])
    (g,) = numeric_gradient(lambda: float(np.sum(np.sin(x))), [x])
    np.testing.assert_allclose(g, np.cos([0.5, -1.0]), atol=1e-9)
