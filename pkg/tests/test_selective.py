import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selnet import autodiff as ad
from selnet.autodiff import Tensor
from selnet.gradcheck import EULER_GAMMA, check_selective_loss
from selnet.nn import MLPSpec, init_params
from selnet.selective import (
    SelectiveLossConfig,
    SelectiveModel,
    TemperatureSchedule,
    coverage_penalty,
    empirical_coverage,
    gumbel_from_uniform,
    gumbel_max,
    gumbel_softmax_binary,
    pointwise_loss,
    predict,
    sample_gumbel,
    selective_loss,
    selective_risk,
    temperature_at_epoch,
    total_loss,
)

# -log(log 2), evaluated with the math module
GUMBEL_AT_HALF = 0.36651292058166435
# 30 * 0.985 ** 160, evaluated with the math module
TAU_AT_800 = 2.672502587348408


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestGumbel:
    def test_closed_forms(self):
        np.testing.assert_allclose(gumbel_from_uniform([1 / np.e, 0.5]), [0.0, GUMBEL_AT_HALF], atol=1e-15)

    def test_extremes_stay_finite(self):
        assert np.isfinite(gumbel_from_uniform([0.0, 1.0])).all()

    def test_mean_is_euler_gamma(self):
        draws = sample_gumbel(1_000_000, np.random.default_rng(11)).data
        assert abs(draws.mean() - EULER_GAMMA) < 0.01

    def test_sampling_is_seeded(self):
        a = sample_gumbel(5, np.random.default_rng(3)).data
        b = sample_gumbel(5, np.random.default_rng(3)).data
        assert a.tobytes() == b.tobytes()

    def test_gumbel_max_picks_noisy_argmax(self):
        out = gumbel_max(np.log([[0.2, 0.5, 0.3]]), np.array([[2.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out, [[1.0, 0.0, 0.0]])


class TestBinarySelection:
    def test_equal_noise_follows_probability(self):
        out = gumbel_softmax_binary(t([0.9, 0.1]), tau=1.0, noise=np.zeros((2, 2)))
        np.testing.assert_array_equal(out.z_hard.data, [1.0, 0.0])

    @pytest.mark.parametrize("tau", [0.01, 1.0, 30.0])
    def test_half_with_equal_noise_is_half(self, tau):
        out = gumbel_softmax_binary(t([0.5]), tau=tau, noise=np.full((1, 2), 0.7))
        assert out.z_soft.data[0] == 0.5

    def test_selection_rate(self):
        out = gumbel_softmax_binary(t(np.full(1_000_000, 0.3)), tau=1.0, rng=np.random.default_rng(5))
        assert abs(out.z_hard.data.mean() - 0.3) <= 0.005

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_temperature(self, tau):
        with pytest.raises(ValueError, match="temperature"):
            gumbel_softmax_binary(t([0.5]), tau=tau, rng=np.random.default_rng(0))

    def test_noise_shape_checked(self):
        with pytest.raises(ad.ShapeError):
            gumbel_softmax_binary(t([0.5, 0.5]), tau=1.0, noise=np.zeros((2, 3)))

    def test_needs_noise_source(self):
        with pytest.raises(ValueError):
            gumbel_softmax_binary(t([0.5]), tau=1.0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 50.0))
    def test_straight_through_forward_is_binary(self, seed, tau):
        rng = np.random.default_rng(seed)
        out = gumbel_softmax_binary(t(rng.uniform(0.01, 0.99, 8)), tau, rng=rng)
        assert out.z_st.data.tolist() == out.z_hard.data.tolist()
        assert set(out.z_hard.data.tolist()) <= {0.0, 1.0}

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
    def test_straight_through_gradient_is_soft_gradient(self, seed, tau):
        # nonlinear loss: the upstream gradient is taken at z_hard, then pulled back along z_soft
        rng = np.random.default_rng(seed)
        g = Tensor(rng.uniform(0.05, 0.95, 6), requires_grad=True)
        noise = sample_gumbel((6, 2), rng).data
        losses = t(rng.uniform(0, 3, 6))
        cfg = SelectiveLossConfig(coverage=0.7)
        with ad.Tape() as tape:
            out = gumbel_softmax_binary(g, tau, noise=noise)
            loss = selective_loss(cfg, losses, out.z_st)
        got = tape.gradient(loss, [g])[g]

        z = Tensor(out.z_hard.data, requires_grad=True)
        with ad.Tape() as tape:
            upstream = tape.gradient(selective_loss(cfg, losses, z), [z])[z]
        with ad.Tape() as tape:
            soft_only = ad.sum(gumbel_softmax_binary(g, tau, noise=noise).z_soft * t(upstream))
        want = tape.gradient(soft_only, [g])[g]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
    def test_straight_through_vjp_matches_soft_path(self, seed, tau):
        # any downstream cotangent pulled back through z_st equals that through z_soft
        rng = np.random.default_rng(seed)
        g = Tensor(rng.uniform(0.05, 0.95, 5), requires_grad=True)
        noise = sample_gumbel((5, 2), rng).data
        cot = t(rng.normal(size=5))
        grads = []
        for attr in ("z_st", "z_soft"):
            with ad.Tape() as tape:
                z = getattr(gumbel_softmax_binary(g, tau, noise=noise), attr)
                loss = ad.sum(z * cot)
            grads.append(tape.gradient(loss, [g])[g])
        np.testing.assert_allclose(grads[0], grads[1], rtol=0, atol=1e-12)

    def test_high_temperature_is_uniform(self):
        rng = np.random.default_rng(2)
        out = gumbel_softmax_binary(t(rng.uniform(0.01, 0.99, 1000)), tau=100.0, rng=rng)
        assert np.abs(out.z_soft.data - 0.5).max() < 0.05

    def test_low_temperature_is_hard(self):
        rng = np.random.default_rng(3)
        p = rng.uniform(0.01, 0.99, 1000)
        noise = sample_gumbel((1000, 2), rng).data
        out = gumbel_softmax_binary(t(p), tau=0.01, noise=noise)
        # a draw whose noisy logits nearly tie stays soft at any fixed tau
        gap = np.abs(np.log(p) + noise[:, 0] - np.log(1 - p) - noise[:, 1])
        clear = gap >= 0.2
        assert clear.mean() > 0.9
        assert np.abs(out.z_soft.data - out.z_hard.data)[clear].max() < 1e-6


class TestObjective:
    def test_coverage(self):
        assert empirical_coverage(t([1, 1, 0, 1])).item() == 0.75
        assert empirical_coverage(t([1, 1])).item() == 1.0
        assert empirical_coverage(t([0.2, 0.4])).item() == pytest.approx(0.3, abs=1e-15)
        with pytest.raises(ValueError):
            empirical_coverage(t([]))

    def test_risk(self):
        assert selective_risk(t([2, 4]), t([1, 0])).item() == pytest.approx(2.0, abs=1e-12)
        assert selective_risk(t([2, 4]), t([1, 1])).item() == pytest.approx(3.0, abs=1e-12)
        assert selective_risk(t([2, 4]), t([0, 0])).item() == 0.0

    def test_penalty(self):
        assert coverage_penalty(0.7, 0.8).item() == 0.0
        assert coverage_penalty(0.7, 0.6).item() == pytest.approx(0.01, abs=1e-12)
        assert coverage_penalty(0.7, 0.7).item() == 0.0

    @given(st.floats(0.01, 1.0), st.floats(0.0, 1.0))
    def test_penalty_one_sided(self, c, cov):
        value = coverage_penalty(c, cov).item()
        assert value == (0.0 if cov >= c else pytest.approx((c - cov) ** 2, rel=1e-12))

    def test_selective_loss(self):
        cfg = SelectiveLossConfig(coverage=0.7, lam=32)
        assert selective_loss(cfg, t([2, 4]), t([1, 0])).item() == pytest.approx(3.28, abs=1e-12)
        no_penalty = SelectiveLossConfig(coverage=0.7, lam=0)
        assert selective_loss(no_penalty, t([2, 4]), t([1, 0])).item() == selective_risk(t([2, 4]), t([1, 0])).item()
        assert selective_loss(cfg, t([2, 4]), t([1, 1])).item() == pytest.approx(3.0, abs=1e-12)

    def test_total_loss_mix(self):
        # soft mode with g = [1, 0]: per-row absolute losses [2, 4], aux losses 3
        cfg = SelectiveLossConfig(coverage=0.7, lam=32, alpha=0.5, mode="soft", loss="absolute")
        target = t([[0.0], [0.0]])
        parts = total_loss(cfg, t([[2.0], [4.0]]), t([[3.0], [-3.0]]), t([1.0, 0.0]), target)
        assert parts.selective.item() == pytest.approx(3.28, abs=1e-12)
        assert parts.auxiliary.item() == pytest.approx(3.0, abs=1e-12)
        assert parts.total.item() == pytest.approx(3.14, abs=1e-12)

    def test_alpha_one_drops_auxiliary(self):
        cfg = SelectiveLossConfig(coverage=0.7, alpha=1.0, mode="soft", loss="absolute")
        parts = total_loss(cfg, t([[2.0], [4.0]]), t([[1e6], [1e6]]), t([1.0, 0.0]), t([[0.0], [0.0]]))
        assert parts.total.item() == pytest.approx(3.28, abs=1e-12)

    def test_soft_mode_full_selection_is_plain_risk_mix(self):
        cfg = SelectiveLossConfig(coverage=0.8, alpha=0.5, mode="soft")
        pred, aux, y = t([[1.0], [2.0], [0.0]]), t([[0.0], [0.0], [0.0]]), t([[0.0], [0.0], [1.0]])
        parts = total_loss(cfg, pred, aux, t([1.0, 1.0, 1.0]), y)
        assert parts.total.item() == pytest.approx(0.5 * 2.0 + 0.5 * (1 / 3), abs=1e-12)

    def test_gumbel_mode_needs_temperature(self):
        cfg = SelectiveLossConfig(mode="gumbel")
        with pytest.raises(ValueError):
            total_loss(cfg, t([[1.0]]), t([[1.0]]), t([0.5]), t([[0.0]]), rng=np.random.default_rng(0))

    def test_pointwise_losses(self):
        pred, y = t([[1.0, 2.0], [0.0, -1.0]]), t([[0.0, 0.0], [0.0, 1.0]])
        assert pointwise_loss(pred, y, "squared").data.tolist() == [5.0, 4.0]
        assert pointwise_loss(pred, y, "absolute").data.tolist() == [3.0, 2.0]
        ce = pointwise_loss(t([[0.0, 0.0]]), t([[1.0, 0.0]]), "cross_entropy").item()
        assert ce == pytest.approx(np.log(2), abs=1e-12)

    @pytest.mark.parametrize(
        "kwargs", [dict(coverage=0.0), dict(coverage=1.2), dict(lam=-1), dict(alpha=1.5), dict(mode="hard"), dict(loss="huber")]
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SelectiveLossConfig(**kwargs)

    @pytest.mark.parametrize("mode", ["gumbel", "soft"])
    def test_composed_loss_gradcheck(self, mode):
        res = check_selective_loss(0, mode)
        assert res.passed, res.line()


class TestTemperature:
    @pytest.mark.parametrize("epoch, tau", [(0, 30.0), (4, 30.0), (5, 30 * 0.985), (800, TAU_AT_800)])
    def test_schedule(self, epoch, tau):
        assert temperature_at_epoch(TemperatureSchedule(30, 0.985, 5), epoch) == pytest.approx(tau, rel=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(initial=0), dict(rate=0), dict(rate=1.1), dict(step=0)])
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            TemperatureSchedule(**kwargs)


class TestModel:
    def make(self):
        rng = np.random.default_rng(0)
        return SelectiveModel(init_params(MLPSpec(4, (8,), True), rng), 1, rng)

    def test_head_shapes(self):
        model = self.make()
        f, g, h = model(t(np.ones((3, 4)) * [[1], [2], [3]]), train=True)
        assert f.shape == (3, 1) and g.shape == (3,) and h.shape == (3, 1)
        assert model.selector_hidden.out_features == 16

    def test_predict_is_deterministic_and_bounded(self):
        model = self.make()
        x = np.random.default_rng(1).normal(size=(20, 4))
        model(t(x), train=True)
        (f1, g1), (f2, g2) = predict(model, x), predict(model, x)
        assert f1.tobytes() == f2.tobytes() and g1.tobytes() == g2.tobytes()
        assert np.all((g1 >= 0) & (g1 <= 1))

    def test_state_dict_includes_buffers(self):
        keys = set(self.make().state_dict())
        assert {"predictor.weight", "selector.1.bias", "backbone.0.bn.running_var"} <= keys
