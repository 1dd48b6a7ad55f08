"""Cell tests: gate algebra, scalar-loop oracle equivalence, parameter counts."""
import numpy as np
import pytest

from conftest import nested, scalar_gru_step, scalar_lstm_step
from hystkit.autodiff import Graph, ShapeError, Tensor, finite_diff_check
from hystkit.cells import (
    GruParams,
    LstmParams,
    gru_step,
    init_gru_params,
    init_lstm_params,
    lstm_step,
    param_count,
)


def wrap(container):
    return container.map(lambda a: Tensor(a))


def zero_gru(d_g, d_x):
    return init_gru_params(d_g, d_x, np.random.default_rng(0)).map(np.zeros_like)


def zero_lstm(d_g, d_x):
    return init_lstm_params(d_g, d_x, np.random.default_rng(0)).map(np.zeros_like)


class TestGruStep:
    def test_zero_params_halve_state(self):
        g_prev = np.array([[0.4, -0.8, 0.2]])
        out = gru_step(Tensor(np.array([[0.3, 0.1]])), Tensor(g_prev), wrap(zero_gru(3, 2)))
        np.testing.assert_allclose(out.data, 0.5 * g_prev, atol=1e-15)

    def test_saturated_update_gate_keeps_state(self):
        p = zero_gru(3, 2)
        p.b_z = np.full(3, 50.0)
        g_prev = np.array([[0.4, -0.8, 0.2]])
        out = gru_step(Tensor(np.array([[0.3, 0.1]])), Tensor(g_prev), wrap(p))
        np.testing.assert_array_equal(out.data, g_prev)  # z == 1 exactly at 50

    def test_closed_update_gate_returns_candidate(self):
        rng = np.random.default_rng(4)
        p = init_gru_params(3, 2, rng)
        p.b_z = np.full(3, -50.0)
        x = rng.standard_normal((1, 2))
        g_prev = rng.standard_normal((1, 3))
        out = gru_step(Tensor(x), Tensor(g_prev), wrap(p))
        # with z == 0 the output equals the candidate, recomputed here directly
        sig = lambda v: 1.0 / (1.0 + np.exp(-v))
        r = sig(x @ p.w_r.T + p.b_r + g_prev @ p.u_r.T)
        cand = np.tanh(x @ p.w.T + p.b + r * (g_prev @ p.u.T + p.b_n))
        np.testing.assert_allclose(out.data, cand, atol=1e-12)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(11)
        p = init_gru_params(3, 2, rng)
        x = rng.standard_normal((1, 2))
        g_prev = rng.uniform(-1, 1, (1, 3))
        out = gru_step(Tensor(x), Tensor(g_prev), wrap(p))
        ref = scalar_gru_step(nested(x[0]), nested(g_prev[0]),
                              {k: nested(v) for k, v in p.as_dict().items()})
        np.testing.assert_allclose(out.data[0], ref, atol=1e-12, rtol=0)

    def test_gates_bounded(self):
        rng = np.random.default_rng(12)
        p = init_gru_params(4, 4, rng)
        for _ in range(20):
            x = Tensor(rng.uniform(-3, 3, (2, 4)))
            g_prev = Tensor(rng.uniform(-1, 1, (2, 4)))
            out = gru_step(x, g_prev, wrap(p))
            # the new state is a convex combination of g_prev and a tanh value
            bound = np.maximum(np.abs(g_prev.data), 1.0)
            assert np.all(np.abs(out.data) <= bound + 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gru_step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), wrap(zero_gru(3, 2)))

    def test_gradients_all_param_families(self):
        rng = np.random.default_rng(13)
        base = init_gru_params(3, 2, rng)
        names = GruParams.names()
        x = rng.standard_normal((1, 2))
        g_prev = rng.uniform(-0.8, 0.8, (1, 3))

        def fn(*tensors):
            p = GruParams(**dict(zip(names, tensors)))
            out = gru_step(Tensor(x), Tensor(g_prev), p)
            return (out * out).sum()

        graph = Graph(fn, len(names))
        err = finite_diff_check(graph, [base.as_dict()[n] for n in names])
        assert err < 1e-6


class TestLstmStep:
    def test_zero_params(self):
        c_prev = np.array([[0.6, -0.4]])
        g, c = lstm_step(Tensor(np.array([[0.2]])), Tensor(np.zeros((1, 2))),
                         Tensor(c_prev), wrap(zero_lstm(2, 1)))
        np.testing.assert_allclose(c.data, 0.5 * c_prev, atol=1e-15)
        np.testing.assert_allclose(g.data, 0.5 * np.tanh(0.5 * c_prev), atol=1e-15)

    def test_perfect_memory_gates(self):
        p = zero_lstm(2, 1)
        p.b_f = np.full(2, 50.0)
        p.b_i = np.full(2, -50.0)
        c_prev = np.array([[0.6, -0.4]])
        _, c = lstm_step(Tensor(np.array([[0.9]])), Tensor(np.zeros((1, 2))),
                         Tensor(c_prev), wrap(p))
        np.testing.assert_array_equal(c.data, c_prev)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(21)
        p = init_lstm_params(3, 2, rng)
        x = rng.standard_normal((1, 2))
        g_prev = rng.uniform(-1, 1, (1, 3))
        c_prev = rng.uniform(-1, 1, (1, 3))
        g, c = lstm_step(Tensor(x), Tensor(g_prev), Tensor(c_prev), wrap(p))
        g_ref, c_ref = scalar_lstm_step(nested(x[0]), nested(g_prev[0]), nested(c_prev[0]),
                                        {k: nested(v) for k, v in p.as_dict().items()})
        np.testing.assert_allclose(g.data[0], g_ref, atol=1e-12, rtol=0)
        np.testing.assert_allclose(c.data[0], c_ref, atol=1e-12, rtol=0)

    def test_missing_cell_state(self):
        with pytest.raises(ShapeError):
            lstm_step(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 2))), None, wrap(zero_lstm(2, 1)))

    def test_gradients_all_param_families(self):
        rng = np.random.default_rng(22)
        base = init_lstm_params(2, 2, rng)
        names = LstmParams.names()
        x = rng.standard_normal((1, 2))
        g_prev = rng.uniform(-0.8, 0.8, (1, 2))
        c_prev = rng.uniform(-0.8, 0.8, (1, 2))

        def fn(*tensors):
            p = LstmParams(**dict(zip(names, tensors)))
            g, c = lstm_step(Tensor(x), Tensor(g_prev), Tensor(c_prev), p)
            return (g * g).sum() + (c * c).sum()

        graph = Graph(fn, len(names))
        err = finite_diff_check(graph, [base.as_dict()[n] for n in names])
        assert err < 1e-6


class TestParamCount:
    def test_gru_8_1(self):
        assert param_count("gru-p", 8, 1) == 248

    def test_gru_8_4(self):
        assert param_count("gru-p", 8, 4) == 320

    def test_lstm_8_4(self):
        assert param_count("lstm-p", 8, 4) == 416

    def test_ja(self):
        assert param_count("ja", 1, 1) == 5

    def test_matches_actual_arrays(self):
        for d_g, d_x in [(4, 4), (8, 4), (5, 1)]:
            p = init_gru_params(d_g, d_x, np.random.default_rng(0))
            total = sum(v.size for v in p.as_dict().values())
            assert total == param_count("gru-p", d_g, d_x)
            p = init_lstm_params(d_g, d_x, np.random.default_rng(0))
            total = sum(v.size for v in p.as_dict().values())
            assert total == param_count("lstm-p", d_g, d_x)

    def test_invalid(self):
        with pytest.raises(ValueError):
            param_count("gru-p", 0, 4)
        with pytest.raises(ValueError):
            param_count("transformer", 8, 4)
