import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from emq.container import read_container
from emq.errors import ConfigError, DataError, DimensionError, DomainError, InvariantError, ModelFormatError, VersionError
from emq.metrics import ece, eis
from emq.model import (
    AdaptiveTConfig,
    EmqModel,
    EnsembleStepConfig,
    adaptive_stop_check,
    ensemble_step_loss,
    fit_emq,
    fit_ensemble_step,
    fit_initial,
    g_transform,
    gaussian_head_quantiles,
    initial_step_loss,
    lambda_head,
    load_model,
    save_model,
    select_T_ada,
)
from emq.nn import TrainConfig, backward, forward, mlp_init
from emq.quantiles import QuantileGrid, multi_quantile_loss, normal_quantile, percent_grid
from tests.helpers import fd_gradient, max_rel_error

GRID = percent_grid()
FAST = TrainConfig(max_epochs=15, patience=5, seed=0)


def random_model(rng, d=3, T=5, scale=1.0, variant="emq"):
    f0 = mlp_init([d, 8 * d, 16 * d, 4 * d, 2], ["tanh"] * 3, int(rng.integers(1 << 30)), positive_outputs=[1])
    weak = []
    for _ in range(T):
        m = mlp_init([d, 16, 8, 4], ["tanh"] * 2, int(rng.integers(1 << 30)))
        for p in m.params():
            p += scale * rng.normal(size=p.shape)
        weak.append(m)
    return EmqModel(GRID, f0, weak, T_ada=T, variant=variant)


class TestGaussianHead:
    def test_median(self):
        assert gaussian_head_quantiles(0.0, 1.0, GRID)[49] == 0.0

    def test_scaled_975(self):
        g = QuantileGrid((0.025, 0.5, 0.975))
        assert gaussian_head_quantiles(0.0, 2.0, g)[2] == pytest.approx(3.919928, abs=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
    def test_strictly_increasing(self, mu, sigma):
        assert np.all(np.diff(gaussian_head_quantiles(mu, sigma, GRID)) > 0)

    def test_sigma_domain(self):
        with pytest.raises(DomainError):
            gaussian_head_quantiles(0.0, 0.0, GRID)


class TestGTransform:
    Q3 = np.array([0.0, 1.0, 3.0])

    def _middle(self, lam):
        # B large enough that the ends do not matter for the middle entry
        return g_transform(self.Q3, [0.0, lam, 0.0], B=100.0)[1]

    def test_zero_lambda_is_identity(self):
        q = np.sort(np.random.default_rng(0).normal(size=99))
        assert np.array_equal(g_transform(q, np.zeros(99), 10.0), q)

    def test_boundary_values(self):
        # g(1) = r = (3 - 1)/2 and g(-1) = l = (0 - 1)/2, approached from inside (-1, 1)
        lam = 1 - 1e-12
        assert self._middle(lam) - 1.0 == pytest.approx(1.0, abs=1e-11)
        assert self._middle(-lam) - 1.0 == pytest.approx(-0.5, abs=1e-11)

    def test_half_lambda_branches(self):
        assert abs(self._middle(0.5) - 1.5) <= 1e-12
        assert abs(self._middle(-0.5) - 0.75) <= 1e-12

    def test_uses_boundary_constant_at_ends(self):
        out = g_transform(self.Q3, [-0.5, 0.0, 0.5], B=5.0)
        assert out[0] == pytest.approx(0.0 + 0.5 * (-5.0 - 0.0) / 2)
        assert out[2] == pytest.approx(3.0 + 0.5 * (5.0 - 3.0) / 2)

    def test_fan_beyond_boundary_stays_ordered(self):
        # ends past +-B get reflected virtual neighbours instead of -B/+B inside the fan
        q = np.array([-14.0, -3.0, 2.0, 12.0])
        out = g_transform(q, [-0.9, 0.9, -0.9, 0.9], B=10.0)
        assert np.all(np.diff(out) > 0)
        assert out[0] == pytest.approx(-14.0 + 0.9 * (2 * -14.0 + 10.0 - -14.0) / 2)
        assert out[3] == pytest.approx(12.0 + 0.9 * (2 * 12.0 - 10.0 - 12.0) / 2)
        # exactly at the boundary the reflected end coincides with -B
        assert g_transform([-10.0, 0.0], [-0.5, 0.0], 10.0)[0] == -10.0

    def test_rejects_non_monotone_input(self):
        with pytest.raises(InvariantError):
            g_transform([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], 10.0)

    def test_rejects_lambda_out_of_range(self):
        with pytest.raises(DomainError):
            g_transform(self.Q3, [0.0, 1.0, 0.0], 10.0)

    @settings(max_examples=300, deadline=None)
    @given(arrays(np.float64, 20, elements=st.floats(1e-3, 1.0)),
           arrays(np.float64, 20, elements=st.floats(-0.999999, 0.999999)),
           st.floats(-3, 3))
    def test_sandwich_and_monotone(self, gaps, lam, start):
        q = start + np.cumsum(gaps)
        B = 100.0
        out = g_transform(q, lam, B)
        assert np.all(np.diff(out) > 0)
        padded = np.concatenate([[-B], q, [B]])
        lo = 0.5 * (padded[:-2] + padded[1:-1])
        hi = 0.5 * (padded[1:-1] + padded[2:])
        assert np.all(out >= lo) and np.all(out <= hi)
        strict = np.abs(lam) < 1 - 1e-9
        assert np.all(out[strict] > lo[strict]) and np.all(out[strict] < hi[strict])


class TestLambdaHead:
    def test_zero(self):
        assert np.all(lambda_head(np.zeros(4), GRID) == 0.0)

    def test_constant_half(self):
        # artanh(0.5) by bisection on tanh
        lo, hi = 0.0, 1.0
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if math.tanh(mid) < 0.5 else (lo, mid)
        a0 = 0.5 * (lo + hi)
        assert a0 == pytest.approx(0.549306, abs=1e-6)
        np.testing.assert_allclose(lambda_head([a0, 0, 0, 0], GRID), 0.5, atol=1e-12)

    def test_cubic_polynomial(self):
        a = np.array([0.1, -0.4, 0.8, 0.3])
        t = GRID.taus
        np.testing.assert_allclose(lambda_head(a, GRID), np.tanh(a[0] + a[1] * t + a[2] * t ** 2 + a[3] * t ** 3),
                                   rtol=1e-14)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 4, elements=st.floats(-1e6, 1e6)))
    def test_open_interval(self, a):
        lam = lambda_head(a, GRID)
        assert np.all(np.abs(lam) < 1.0)


class TestLossGradients:
    def _fd_wrt_pred(self, loss, pred, labels, h=1e-6):
        num = np.zeros_like(pred)
        for idx in np.ndindex(pred.shape):
            old = pred[idx]
            pred[idx] = old + h
            up = loss(pred, labels)[0]
            pred[idx] = old - h
            down = loss(pred, labels)[0]
            pred[idx] = old
            num[idx] = (up - down) / (2 * h)
        return num

    @pytest.mark.parametrize("seed", range(10))
    def test_step_loss_wrt_coefficients(self, seed):
        rng = np.random.default_rng(seed)
        n = 6
        Qp = np.sort(rng.normal(size=(n, 99)), axis=1) * 2
        y = rng.normal(size=n) * 2
        a = rng.normal(size=(n, 4))
        lam = lambda_head(a, GRID)
        Q = g_transform(Qp, lam, 10.0)
        if np.min(np.abs(lam)) < 1e-4 or np.min(np.abs(y[:, None] - Q)) < 1e-4:
            pytest.skip("instance too close to a kink")
        for w in (np.ones(99), 1 + rng.random(99)):
            loss = ensemble_step_loss(GRID, w, 10.0)
            labels = np.column_stack([y, Qp])
            value, grad = loss(a, labels)
            assert value == pytest.approx(multi_quantile_loss(y, Q, GRID, w), rel=1e-12)
            num = self._fd_wrt_pred(loss, a.copy(), labels)
            assert max_rel_error([grad], [num]) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_initial_loss_wrt_head(self, seed):
        rng = np.random.default_rng(seed)
        n = 5
        pred = np.column_stack([rng.normal(size=n), rng.uniform(0.5, 2, size=n)])
        y = rng.normal(size=n)
        loss = initial_step_loss(GRID, np.ones(99))
        value, grad = loss(pred, y[:, None])
        Q = gaussian_head_quantiles(pred[:, 0], pred[:, 1] + 1e-6, GRID)
        assert value == pytest.approx(multi_quantile_loss(y, Q, GRID), rel=1e-12)
        assert max_rel_error([grad], [self._fd_wrt_pred(loss, pred.copy(), y[:, None])]) < 1e-4

    def test_zero_lambda_uses_left_slope(self):
        Qp = np.array([[0.0, 1.0, 3.0]])
        g3 = QuantileGrid((0.25, 0.5, 0.75))
        loss = ensemble_step_loss(g3, np.ones(3), 10.0)
        _, grad = loss(np.zeros((1, 4)), np.array([[5.0, *Qp[0]]]))
        # y above every quantile: dL/dq = -tau; slope at lambda=0 is -l = (q_k - q_{k-1})/2
        slopes = np.array([(0.0 + 10.0) / 2, 0.5, 1.0])
        expected = (-g3.taus * slopes) @ np.vander(g3.taus, 4, increasing=True)
        np.testing.assert_allclose(grad[0], expected, rtol=1e-12)


def _synthetic_gaussian(n, rng, d=2):
    X = rng.uniform(-2, 2, size=(n, d))
    return X, rng.standard_normal(n)


class TestFitInitial:
    def test_recovers_standard_normal(self):
        rng = np.random.default_rng(0)
        X, y = _synthetic_gaussian(5000, rng)
        Xv, yv = _synthetic_gaussian(1250, rng)
        f0, _ = fit_initial((X, y), (Xv, yv), TrainConfig(seed=1), GRID)
        model = EmqModel(GRID, f0, [], T_ada=0, variant="emq0")
        mu, sigma = model.gaussian_params(rng.uniform(-2, 2, size=(1000, 2)))
        assert np.mean(np.abs(mu) <= 0.1) >= 0.95
        assert np.mean((sigma >= 0.9) & (sigma <= 1.1)) >= 0.95

    def test_constant_target_collapses(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-2, 2, size=(2000, 2))
        Xv = rng.uniform(-2, 2, size=(500, 2))
        f0, _ = fit_initial((X, np.full(2000, 3.0)), (Xv, np.full(500, 3.0)), TrainConfig(seed=2), GRID)
        Q = EmqModel(GRID, f0, [], T_ada=0, variant="emq0").predict_quantiles(Xv)
        assert eis(Q, GRID) < 0.1
        assert np.all(np.abs(Q[:, 49] - 3.0) < 0.1)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        X, y = _synthetic_gaussian(400, rng)
        a, _ = fit_initial((X[:300], y[:300]), (X[300:], y[300:]), FAST, GRID)
        b, _ = fit_initial((X[:300], y[:300]), (X[300:], y[300:]), FAST, GRID)
        for p, q in zip(a.params(), b.params()):
            assert np.array_equal(p, q)

    def test_gradient_through_gaussian_head(self):
        rng = np.random.default_rng(3)
        f0 = mlp_init([2, 4, 6, 3, 2], ["tanh"] * 3, seed=3, positive_outputs=[1])
        X, y = rng.normal(size=(5, 2)), rng.normal(size=5)
        loss = initial_step_loss(GRID, np.ones(99))
        _, g = loss(forward(f0, X), y[:, None])
        analytic = backward(f0, g)
        numeric = fd_gradient(lambda: loss(forward(f0, X, cache=False), y[:, None])[0], f0.params())
        assert max_rel_error(analytic, numeric) < 1e-4


class TestFitEnsembleStep:
    def _setup(self, seed=0, n=3000, inflate=2.0):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-2, 2, size=(n, 2))
        y = X[:, 0] + rng.standard_normal(n)
        Xv = rng.uniform(-2, 2, size=(n // 4, 2))
        yv = Xv[:, 0] + rng.standard_normal(n // 4)
        Q = gaussian_head_quantiles(X[:, 0], np.full(n, inflate), GRID)
        Qv = gaussian_head_quantiles(Xv[:, 0], np.full(n // 4, inflate), GRID)
        return (X, y), (Xv, yv), Q, Qv

    def test_improves_miscalibrated_fan(self):
        train, val, Q, Qv = self._setup()
        mlp, _ = fit_ensemble_step(train, val, Q, Qv, TrainConfig(seed=0), EnsembleStepConfig(), GRID, seed=5)
        from emq.model import _apply_step

        before = multi_quantile_loss(val[1], Qv, GRID)
        after = multi_quantile_loss(val[1], _apply_step(Qv, forward(mlp, val[0], cache=False), GRID, 10.0), GRID)
        assert after < before
        tr_before = multi_quantile_loss(train[1], Q, GRID)
        tr_after = multi_quantile_loss(train[1], _apply_step(Q, forward(mlp, train[0], cache=False), GRID, 10.0), GRID)
        assert tr_after <= tr_before + 1e-9

    def test_well_specified_fan_not_worsened(self):
        train, val, Q, Qv = self._setup(seed=1, inflate=1.0)
        mlp, _ = fit_ensemble_step(train, val, Q, Qv, TrainConfig(seed=1), EnsembleStepConfig(), GRID, seed=6)
        from emq.model import _apply_step

        base = multi_quantile_loss(train[1], Q, GRID)
        after = multi_quantile_loss(train[1], _apply_step(Q, forward(mlp, train[0], cache=False), GRID, 10.0), GRID)
        assert after <= base + 1e-3

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient_through_composed_head(self, seed):
        rng = np.random.default_rng(100 + seed)
        mlp = mlp_init([3, 16, 8, 4], ["tanh", "tanh"], seed=seed)
        X = rng.normal(size=(4, 3))
        Qp = np.sort(rng.normal(size=(4, 99)), axis=1)
        y = rng.normal(size=4)
        labels = np.column_stack([y, Qp])
        loss = ensemble_step_loss(GRID, 1 + rng.random(99), 10.0)
        a = forward(mlp, X)
        lam = lambda_head(a, GRID)
        Q = g_transform(Qp, lam, 10.0)
        if np.min(np.abs(lam)) < 1e-4 or np.min(np.abs(y[:, None] - Q)) < 1e-5:
            pytest.skip("instance too close to a kink")
        _, g = loss(a, labels)
        analytic = backward(mlp, g)
        numeric = fd_gradient(lambda: loss(forward(mlp, X, cache=False), labels)[0], mlp.params())
        assert max_rel_error(analytic, numeric) < 1e-4


class TestAdaptiveStop:
    def test_decreasing_never_stops(self):
        e = list(np.linspace(1.0, 0.1, 41))
        assert not any(adaptive_stop_check(e[:t + 1], 10, 5)[0] for t in range(41))

    def test_hand_sequence(self):
        e = [5, 4, 3, 2, 10, 10]
        assert adaptive_stop_check(e[:4], 4, 2) == (False, 3)
        # even if evaluated at t=3 the rule would not fire: mean(3,2)=2.5 < mean(5,4)=4.5
        assert np.mean(e[2:4]) < np.mean(e[0:2])
        assert adaptive_stop_check(e[:5], 4, 2) == (True, 4)
        assert np.mean(e[3:5]) == 6 and np.mean(e[1:3]) == 3.5

    def test_equal_means_do_not_stop(self):
        assert adaptive_stop_check([0.2] * 11, 10, 5) == (False, 10)

    def test_config_error(self):
        with pytest.raises(ConfigError):
            adaptive_stop_check([1, 2, 3], 2, 2)
        with pytest.raises(ConfigError):
            AdaptiveTConfig(t1=3, t2=5)

    def test_argmin_ties_go_to_smallest(self):
        assert select_T_ada([0.3, 0.1, 0.2, 0.1], 3) == 1
        assert select_T_ada([0.3, 0.1, 0.2, 0.05], 2) == 1


class TestPredict:
    def test_no_weak_learners_is_gaussian(self):
        rng = np.random.default_rng(0)
        m = random_model(rng, T=0, variant="emq0")
        X = rng.normal(size=(50, 3))
        mu, sigma = m.gaussian_params(X)
        np.testing.assert_array_equal(m.predict_quantiles(X), mu[:, None] + sigma[:, None] * normal_quantile(GRID.taus))

    def test_monotone_under_perturbation(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = random_model(rng, T=int(rng.integers(1, 8)), scale=float(rng.uniform(0, 2)))
            Q = m.predict_quantiles(rng.normal(scale=2, size=(500, 3)))
            assert np.all(np.diff(Q, axis=1) > 0)

    def test_batch_partition_invariant(self):
        rng = np.random.default_rng(2)
        m = random_model(rng, T=4)
        X = rng.normal(size=(30, 3))
        full = m.predict_quantiles(X)
        rows = np.vstack([m.predict_quantiles(X[i]) for i in range(30)])
        np.testing.assert_allclose(rows, full, rtol=0, atol=1e-12)

    def test_zero_coefficients_reproduce_previous_step(self):
        rng = np.random.default_rng(3)
        m = random_model(rng, T=2)
        last = m.weak_learners[-1]
        last.weights[-1][:] = 0.0
        last.biases[-1][:] = 0.0
        fans = m.predict_fans(rng.normal(size=(10, 3)))
        assert np.array_equal(fans[-1], fans[-2])

    def test_dimension_error(self):
        m = random_model(np.random.default_rng(4), T=1)
        with pytest.raises(DimensionError):
            m.predict_quantiles(np.zeros((2, 5)))


class TestFitEmq:
    def _data(self, seed=0, n=1200):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-2, 2, size=(n, 2))
        y = X[:, 0] + np.where(rng.random(n) < 0.5, 1.0, -1.0) + 0.3 * rng.standard_normal(n)
        y = (y - y.mean()) / y.std()
        return (X[: n * 4 // 5], y[: n * 4 // 5]), (X[n * 4 // 5:], y[n * 4 // 5:])

    def test_emq0_has_no_steps(self):
        train, val = self._data()
        m = fit_emq(train, val, GRID, "emq0", FAST)
        assert m.T_ada == 0 and m.weak_learners == [] and len(m.trace) == 1

    def test_trace_and_argmin(self):
        train, val = self._data(1)
        m = fit_emq(train, val, GRID, "emq", FAST, adaptive_cfg=AdaptiveTConfig(T_max=6, t1=4, t2=2))
        assert len(m.trace) == m.t_prime + 1 <= 7
        assert m.T_ada == int(np.argmin(m.trace[: m.t_prime + 1]))
        assert len(m.weak_learners) == m.T_ada
        # replay the stopping rule offline
        stops = [adaptive_stop_check(m.trace[: t + 1], 4, 2)[0] for t in range(m.t_prime + 1)]
        assert not any(stops[:-1])
        assert stops[-1] == m.stopped_early
        fans = m.predict_fans(val[0])
        assert ece(fans[-1], val[1], GRID) == pytest.approx(m.trace[m.T_ada], abs=1e-15)
        assert ece(fans[0], val[1], GRID) == m.trace[0]

    def test_emqw_uses_weights_at_step_zero(self):
        train, val = self._data(2)
        a = fit_emq(train, val, GRID, "emq", FAST, adaptive_cfg=AdaptiveTConfig(T_max=0))
        b = fit_emq(train, val, GRID, "emqw", FAST, adaptive_cfg=AdaptiveTConfig(T_max=0))
        assert not np.array_equal(a.f0.weights[0], b.f0.weights[0])

    def test_empty_data(self):
        with pytest.raises(DataError):
            fit_emq((np.zeros((0, 2)), np.zeros(0)), (np.zeros((3, 2)), np.zeros(3)), GRID, "emq", FAST)

    def test_unknown_variant(self):
        train, val = self._data()
        with pytest.raises(ConfigError):
            fit_emq(train, val, GRID, "gbdt", FAST)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        m = random_model(rng, T=3)
        m.trace, m.t_prime = [0.1, 0.08, 0.07, 0.09], 3
        path = tmp_path / "m.emqm"
        save_model(m, path)
        back = load_model(path)
        for a, b in zip(m.networks(), back.networks()):
            assert a.layer_sizes == b.layer_sizes and a.activations == b.activations
            for p, q in zip(a.params(), b.params()):
                assert np.array_equal(p, q)
        X = rng.normal(size=(20, 3))
        assert np.array_equal(m.predict_quantiles(X), back.predict_quantiles(X))
        assert back.trace == m.trace and back.variant == m.variant and back.grid == m.grid

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.emqm"
        save_model(random_model(np.random.default_rng(1), T=1), path)
        raw = path.read_bytes()
        assert raw[:4] == b"EMQM"
        magic, header, arrays = read_container(path)
        assert header["variant"] == "emq" and len(arrays) == 8 + 6

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.emqm"
        save_model(random_model(np.random.default_rng(2), T=1), path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (2).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_model(path)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "m.emqm"
        save_model(random_model(np.random.default_rng(3), T=1), path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ModelFormatError):
            load_model(path)
        path.write_bytes(b"nope")
        with pytest.raises(ModelFormatError):
            load_model(path)
