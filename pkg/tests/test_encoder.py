import numpy as np
import pytest

from gradcheck import assert_grads_close, numeric_grad
from gridres.dataio import ForecastModel, make_forecasts, synth_generator
from gridres.encoder import GruEncoder, build_window
from gridres.grid import LoadSpec, PvSpec

PV = [PvSpec(id="PV1", p_max=1.0), PvSpec(id="PV2", p_max=2.0)]
LOAD = [LoadSpec(id="L1", p_max=1.0)]


def series_and_forecasts(std=0.0, days=2, horizon=8, seed=1):
    series = synth_generator(np.random.default_rng(seed), days, PV, LOAD)
    table = make_forecasts(series, ForecastModel(std, std), horizon,
                           np.random.default_rng(seed + 1), PV, LOAD)
    return series, table


class TestBuildWindow:
    def test_single_column_horizon(self):
        series, table = series_and_forecasts(horizon=1)
        w = build_window(series, table, 0, 40, 1)
        assert w.shape == (3, 1)
        assert w[:, 0] == pytest.approx(
            list(series.pv[:, 0, 40]) + [series.load[0, 0, 40]])

    def test_constant_series_perfect_forecasts(self):
        series, table = series_and_forecasts()
        series.pv[:] = 0.7
        series.load[:] = 0.3
        table = make_forecasts(series, ForecastModel(0, 0), 8,
                               np.random.default_rng(0), PV, LOAD)
        w = build_window(series, table, 0, 10, 8)
        assert np.allclose(w[:2], 0.7)
        assert np.allclose(w[2:], 0.3)

    def test_end_of_day_holds_last_value(self):
        series, table = series_and_forecasts()
        w = build_window(series, table, 1, 95, 8)
        for j in range(1, 8):
            assert np.allclose(w[:, j], w[:, 0])
        # One slot earlier: only the first forecast column is real.
        w94 = build_window(series, table, 1, 94, 8)
        assert np.allclose(w94[:, 2:], np.repeat(w94[:, 1:2], 6, axis=1))

    def test_out_of_range_slot(self):
        series, table = series_and_forecasts()
        with pytest.raises(IndexError):
            build_window(series, table, 0, 96, 8)


def make_encoder(seed=0, in_dim=3):
    caps = np.array([1.0, 2.0, 1.0])[:in_dim]
    return GruEncoder(in_dim, caps, np.random.default_rng(seed))


class TestGruEncoder:
    def test_zero_params_zero_vector(self):
        enc = make_encoder()
        for k in enc.params:
            enc.params[k] = np.zeros_like(enc.params[k])
        v = enc.encode(np.random.default_rng(0).uniform(0, 1, (3, 8)))
        assert np.array_equal(v, np.zeros(16))

    def test_output_dimension_and_nonnegative(self):
        enc = make_encoder(seed=3)
        rng = np.random.default_rng(4)
        for _ in range(10):
            v = enc.encode(rng.uniform(0, 2, (3, 8)))
            assert v.shape == (16,)
            assert (v >= 0).all()
            assert np.isfinite(v).all()

    def test_deterministic(self):
        enc = make_encoder(seed=5)
        w = np.random.default_rng(6).uniform(0, 1, (3, 8))
        assert enc.encode(w).tobytes() == enc.encode(w).tobytes()

    def test_column_order_matters(self):
        enc = make_encoder(seed=7)
        rng = np.random.default_rng(8)
        w = rng.uniform(0.1, 1.0, (3, 8))
        assert not np.allclose(enc.encode(w), enc.encode(w[:, ::-1].copy()))

    def test_batched_matches_single(self):
        enc = make_encoder(seed=9)
        rng = np.random.default_rng(10)
        windows = rng.uniform(0, 1, (4, 3, 8))
        batch, _ = enc.forward(windows)
        for i in range(4):
            assert np.allclose(batch[i], enc.encode(windows[i]))

    def test_parameter_gradients(self):
        enc = make_encoder(seed=11)
        rng = np.random.default_rng(12)
        windows = rng.uniform(0.1, 1.0, (2, 3, 4))
        seed_grad = rng.standard_normal((2, 16))

        def loss():
            v, _ = enc.forward(windows)
            return float((v * seed_grad).sum())

        v, cache = enc.forward(windows)
        grads = enc.backward(cache, seed_grad)
        # Spot-check every parameter family, including both GRU layers.
        for name in ["emb/W", "l0/Wz", "l0/Uh", "l0/br", "l1/Wh", "l1/Uz",
                     "head/W", "head/b"]:
            num = numeric_grad(lambda _: loss(), enc.params[name])
            assert_grads_close(grads[name], num, context=name)
