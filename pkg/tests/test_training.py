import mpmath
import numpy as np
import pytest

from tntrigger.errors import ConfigError
from tntrigger.model import TnModel, new_model, new_smpo
from tntrigger.training import (AdamState, LossParams, ScoreCalibration, TrainConfig,
                                anomaly_score, batch_loss_and_grad, calibrate, grad, loss,
                                loss_derivative, mean_loss, split_indices, train)

from conftest import random_sites

P = LossParams(50.0, 25.0)


class TestLoss:
    def test_zero_at_target(self):
        assert loss(50.0, P) == 0.0

    @pytest.mark.parametrize("n", [25.0, 75.0])
    def test_one_delta_away(self, n):
        assert loss(n, P) == pytest.approx(625 * (np.sqrt(2) - 1), rel=1e-14)

    def test_collapse_region_against_high_precision(self):
        mpmath.mp.dps = 40
        n, mu, d = mpmath.mpf("0.25"), mpmath.mpf(50), mpmath.mpf(25)
        ref = d**2 * (mpmath.sqrt(1 + ((n - mu) / d) ** 2) - 1) + mpmath.log(n / mu) ** 2
        assert loss(0.25, P) == pytest.approx(float(ref), rel=1e-13)

    def test_zero_norm_is_finite(self):
        value = loss(0.0, P)
        assert np.isfinite(value) and value > 1000
        assert loss_derivative(0.0, P) == pytest.approx(loss_derivative(1e-300, P))

    def test_jump_at_collapse_boundary(self):
        # the penalty switches on below 1 with value ln^2(1/mu), not 0
        eps = 1e-12
        left, right = loss(1 - eps, P), loss(1 + eps, P)
        assert left - right == pytest.approx(np.log(1 / 50) ** 2, rel=1e-6)
        huber_left = loss(1 - eps, P) - np.log((1 - eps) / 50) ** 2
        assert huber_left == pytest.approx(right, rel=1e-9)

    def test_derivative_matches_finite_difference(self):
        for n in [0.3, 0.9, 2.0, 49.0, 50.0, 120.0]:
            h = 1e-6
            fd = (loss(n + h, P) - loss(n - h, P)) / (2 * h)
            assert loss_derivative(n, P) == pytest.approx(fd, rel=1e-6, abs=1e-8)

    def test_vectorized(self):
        out = loss(np.array([50.0, 75.0]), P)
        assert out.shape == (2,)

    def test_params_validated(self):
        with pytest.raises(ConfigError):
            LossParams(0.0, 1.0)
        with pytest.raises(ConfigError):
            LossParams(1.0, -1.0)

    def test_defaults_per_architecture(self):
        assert LossParams.default_for(new_model("19-1")) == LossParams(50, 25)
        assert LossParams.default_for(new_model("19-7-1", bond=2)) == LossParams(50, 15)


class TestGrad:
    def test_single_site_closed_form(self, rng):
        layer = new_smpo(1, (0,), 1, 3, 2, seed=1)
        model = TnModel((layer,))
        x = rng.uniform(0.1, 1, (1, 3))
        w = layer.sites[0][:, :, 0, 0]
        y = x[0] @ w
        n = float(y @ y)
        z = (n - P.mu) / P.delta
        dldn = (n - P.mu) / np.sqrt(1 + z * z)
        expected = dldn * 2 * np.outer(x[0], y)
        got = grad(model, x, P)[0][:, :, 0, 0]
        np.testing.assert_allclose(got, expected, rtol=1e-12)

    def test_zero_gradient_at_target(self, rng):
        layer = new_smpo(3, (1,), 2, 3, 3, seed=2)
        model = TnModel((layer,))
        x = rng.uniform(0.1, 1, (3, 3))
        _, _, norms = batch_loss_and_grad(model, x[None], P)
        scale = np.sqrt(P.mu / norms[0])
        sites = list(layer.sites)
        sites[1] = sites[1] * scale
        model = TnModel((layer.with_sites(sites),))
        for g in grad(model, x, P):
            assert np.max(np.abs(g)) < 1e-9

    @pytest.mark.parametrize("cascade", [False, True])
    def test_finite_differences(self, rng, cascade):
        if cascade:
            model = TnModel((new_smpo(5, (0, 2, 4), 2, 3, 2, seed=3), new_smpo(3, (1,), 2, 2, 3, seed=4)))
        else:
            model = TnModel((new_smpo(5, (2,), 3, 3, 3, seed=3),))
        model = model.with_weights([t * 1.6 for t in model.weights()])
        x = rng.uniform(0.2, 1, (5, 3))
        grads = grad(model, x, P)
        h = 1e-5
        weights = model.weights()
        for k in range(len(weights)):
            idx = tuple(rng.integers(0, s) for s in weights[k].shape)
            plus = [w.copy() for w in weights]
            minus = [w.copy() for w in weights]
            plus[k][idx] += h
            minus[k][idx] -= h
            fd = (mean_loss(model.with_weights(plus), x[None], P)
                  - mean_loss(model.with_weights(minus), x[None], P)) / (2 * h)
            assert abs(grads[k][idx] - fd) <= 1e-4 * max(abs(fd), 1e-3)


class TestAdam:
    def test_zero_gradient_keeps_weights(self):
        w = [np.ones((2, 3))]
        st = AdamState.zeros_like(w)
        out = st.update(w, [np.zeros((2, 3))], 0.1)
        np.testing.assert_array_equal(out[0], w[0])

    def test_first_step_is_lr_times_sign(self):
        w = [np.zeros(3)]
        st = AdamState.zeros_like(w)
        out = st.update(w, [np.array([2.0, -0.5, 1e-3])], 0.01)
        np.testing.assert_allclose(out[0], [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_minimizes_quadratic(self):
        w = [np.array([3.0, -2.0])]
        st = AdamState.zeros_like(w)
        for _ in range(2000):
            w = st.update(w, [2 * w[0]], 0.05)
        assert np.max(np.abs(w[0])) < 1e-2


class TestConfig:
    def test_reference_configs_accepted(self):
        TrainConfig(batch_size=2048, learning_rate=4e-3, patience=50, min_delta=1e-4, max_epochs=200)
        TrainConfig(batch_size=2048, learning_rate=1e-2, patience=50, min_delta=1e-4, max_epochs=200)

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(learning_rate=0.0),
                                    dict(patience=10, max_epochs=5),
                                    dict(splits=(0.8, 0.3, 0.1))])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = TrainConfig(batch_size=64, splits=(0.6, 0.2, 0.2))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_split_indices_disjoint(self):
        tr, va, te = split_indices(1000, (0.70, 0.05, 0.25), 0)
        assert (len(tr), len(va), len(te)) == (700, 50, 250)
        assert len(set(tr) | set(va) | set(te)) == 1000


def _toy(rng, n_events=400):
    x = rng.uniform(0.2, 1.0, (n_events, 5, 3))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


class TestTrain:
    def test_zero_epochs_returns_input(self, rng):
        m = TnModel((new_smpo(5, (2,), 2),))
        best, hist = train(m, _toy(rng), _toy(rng, 50), TrainConfig(max_epochs=0, patience=0))
        assert best is m and hist.train_loss == []

    def test_loss_decreases_on_toy(self, rng):
        m = TnModel((new_smpo(5, (2,), 2, seed=1),))
        cfg = TrainConfig(batch_size=50, learning_rate=5e-3, max_epochs=5, patience=5)
        _, hist = train(m, _toy(rng), _toy(rng, 50), cfg, LossParams(5.0, 2.0))
        assert all(b < a for a, b in zip(hist.train_loss, hist.train_loss[1:]))

    def test_deterministic(self, rng):
        x, v = _toy(rng), _toy(rng, 50)
        cfg = TrainConfig(batch_size=64, max_epochs=3, patience=3, seed=7)
        m = TnModel((new_smpo(5, (2,), 2, seed=1),))
        a, ha = train(m, x, v, cfg, LossParams(5.0, 2.0))
        b, hb = train(m, x, v, cfg, LossParams(5.0, 2.0))
        assert ha.train_loss == hb.train_loss
        for p, q in zip(a.weights(), b.weights()):
            np.testing.assert_array_equal(p, q)

    def test_early_stopping_returns_best(self, rng):
        x, v = _toy(rng), _toy(rng, 50)
        m = TnModel((new_smpo(5, (2,), 2, seed=1),))
        cfg = TrainConfig(batch_size=400, learning_rate=0.5, max_epochs=40, patience=3, min_delta=1e-4)
        best, hist = train(m, x, v, cfg, LossParams(5.0, 2.0))
        assert hist.stop_reason in ("early_stopping", "max_epochs")
        assert mean_loss(best, v, LossParams(5.0, 2.0)) == pytest.approx(
            min(hist.valid_loss), rel=1e-12)
        if hist.stop_reason == "early_stopping":
            assert hist.stopped_epoch - hist.best_epoch == 3

    def test_numeric_failure_keeps_last_good(self, rng):
        x, v = _toy(rng), _toy(rng, 50)
        m = TnModel((new_smpo(5, (2,), 2, seed=1),))
        m = m.with_weights([t * 1e80 for t in m.weights()])
        best, hist = train(m, x, v, TrainConfig(max_epochs=2, patience=2))
        assert hist.stop_reason == "numeric_error" and hist.diagnostic
        assert best is m

    def test_empty_split_rejected(self, rng):
        m = TnModel((new_smpo(5, (2,), 2),))
        with pytest.raises(ConfigError):
            train(m, _toy(rng), np.zeros((0, 5, 3)), TrainConfig(max_epochs=1, patience=1))


class TestScore:
    def test_score_arithmetic(self):
        cal = ScoreCalibration(50.0)
        assert anomaly_score(50.0, cal) == 0.0
        assert anomaly_score(57.5, cal) == 7.5

    def test_recalibration_changes_scores(self):
        float_norms = np.array([48.0, 50.0, 52.0, 70.0])
        shifted = float_norms - 6.0   # e.g. a truncation bias after quantization
        stale = anomaly_score(shifted, calibrate(float_norms[:3]))
        fresh = anomaly_score(shifted, calibrate(shifted[:3]))
        np.testing.assert_allclose(fresh, [2.0, 0.0, 2.0, 20.0])
        assert not np.allclose(stale, fresh)

    def test_calibration_needs_events(self):
        with pytest.raises(ConfigError):
            calibrate([])
