import math

import numpy as np
import pytest

from grustab.gru import (AffineScaler, DeepGruModel, GruLayerParams, deep_step, dumps_model, layer_step,
                         load_model, loads_model, lpv_coefficients, output, save_model, simulate, zero_state)


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def oracle_layer_step(p, x, u):
    """Element-by-element loop, written independently of the vectorised code."""
    n, m = p.W_z.shape
    z, f = [0.0] * n, [0.0] * n
    for i in range(n):
        az = p.b_z[i] + sum(p.W_z[i, j] * u[j] for j in range(m)) + sum(p.U_z[i, j] * x[j] for j in range(n))
        af = p.b_f[i] + sum(p.W_f[i, j] * u[j] for j in range(m)) + sum(p.U_f[i, j] * x[j] for j in range(n))
        z[i], f[i] = _sig(az), _sig(af)
    out = []
    for i in range(n):
        ar = p.b_r[i] + sum(p.W_r[i, j] * u[j] for j in range(m)) + sum(p.U_r[i, j] * f[j] * x[j] for j in range(n))
        out.append(z[i] * x[i] + (1 - z[i]) * math.tanh(ar))
    return np.array(out)


def oracle_deep(m, s, u):
    out, inp = [], u
    for p, x in zip(m.layers, s):
        inp = oracle_layer_step(p, x, inp)
        out.append(inp)
    return out


def test_zero_params_closed_forms():
    p = GruLayerParams.zeros(1, 1)
    x, g = layer_step(p, [1.0], [0.0])
    assert x.tolist() == [0.5]
    assert g.z.tolist() == [0.5] and g.f.tolist() == [0.5] and g.r.tolist() == [0.0]
    for u in (-1.0, 0.3, 1.0):
        assert layer_step(p, [2.0], [u])[0].tolist() == [1.0]


def test_layer_step_matches_oracle(rng):
    for _ in range(20):
        n, m = rng.integers(1, 6, 2)
        p = GruLayerParams.random(n, m, rng, scale=1.5)
        x = rng.uniform(-2, 2, n)
        u = rng.uniform(-1, 1, m)
        np.testing.assert_allclose(layer_step(p, x, u)[0], oracle_layer_step(p, x, u), atol=1e-12, rtol=0)


def test_layer_step_batched_equals_rowwise(rng):
    p = GruLayerParams.random(3, 2, rng)
    X = rng.uniform(-1, 1, (7, 3))
    U = rng.uniform(-1, 1, (7, 2))
    batched = layer_step(p, X, U)[0]
    for i in range(7):
        np.testing.assert_allclose(batched[i], layer_step(p, X[i], U[i])[0], atol=1e-15, rtol=0)


def test_deep_step_depth_one_is_layer_step(rng):
    p = GruLayerParams.random(4, 2, rng)
    m = DeepGruModel((p,), np.eye(4)[:2], np.zeros(2))
    x, u = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 2)
    np.testing.assert_array_equal(deep_step(m, (x,), u)[0], layer_step(p, x, u)[0])


def test_deep_step_zero_weights_halves():
    m = DeepGruModel.zeros(2, [3, 2], 1)
    s = (np.array([1.0, -0.5, 0.25]), np.array([-1.0, 0.75]))
    nxt = deep_step(m, s, [0.3, -0.9])
    for a, b in zip(nxt, s):
        np.testing.assert_array_equal(a, 0.5 * b)


def test_deep_step_matches_oracle(rng):
    m = DeepGruModel.random(2, [4, 3], 2, rng)
    s = tuple(rng.uniform(-1, 1, n) for n in m.widths)
    u = rng.uniform(-1, 1, 2)
    for a, b in zip(deep_step(m, s, u), oracle_deep(m, s, u)):
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_deep_step_rejects_unbounded_input():
    m = DeepGruModel.zeros(1, [2], 1)
    with pytest.raises(ValueError, match="unity"):
        deep_step(m, zero_state(m), [1.0 + 1e-9])
    deep_step(m, zero_state(m), [1.0 + 1e-13])


def test_output_examples(rng):
    p = GruLayerParams.random(3, 1, rng)
    m = DeepGruModel((p,), np.eye(3), np.zeros(3))
    x = rng.uniform(-1, 1, 3)
    np.testing.assert_array_equal(output(m, (x,)), x)
    m0 = DeepGruModel((p,), np.zeros((2, 3)), np.array([0.5, -1.0]))
    np.testing.assert_array_equal(output(m0, (x,)), [0.5, -1.0])
    m1 = DeepGruModel.random(1, [3], 2, rng)
    expected = [sum(m1.U_o[i, j] * x[j] for j in range(3)) + m1.b_o[i] for i in range(2)]
    np.testing.assert_allclose(output(m1, (x,)), expected, atol=1e-14)


def test_simulate_empty():
    m = DeepGruModel.zeros(2, [3], 1)
    tr = simulate(m, None, np.empty((0, 2)))
    assert len(tr) == 0 and tr.states[0].shape == (0, 3)


def test_simulate_zero_weights_geometric():
    m = DeepGruModel.zeros(1, [2], 1)
    x0 = np.array([0.8, -0.4])
    tr = simulate(m, (x0,), np.zeros((10, 1)))
    norms = np.abs(tr.states[0]).max(axis=1)
    np.testing.assert_allclose(norms, 0.5 ** np.arange(10) * 0.8, rtol=0, atol=0)


def test_simulate_matches_step_oracle(rng):
    m = DeepGruModel.random(2, [3, 4], 2, rng)
    u = rng.uniform(-1, 1, (25, 2))
    s = tuple(rng.uniform(-1, 1, n) for n in m.widths)
    tr = simulate(m, s, u)
    for k in range(25):
        for i in range(m.depth):
            np.testing.assert_allclose(tr.states[i][k], s[i], atol=1e-12, rtol=0)
        np.testing.assert_allclose(tr.outputs[k], output(m, s), atol=1e-12, rtol=0)
        s = tuple(oracle_deep(m, s, u[k]))


def test_simulate_batch_equals_single(rng):
    m = DeepGruModel.random(2, [3, 2], 1, rng)
    u = rng.uniform(-1, 1, (15, 4, 2))
    x0 = tuple(rng.uniform(-1, 1, (4, n)) for n in m.widths)
    tr = simulate(m, x0, u)
    for b in range(4):
        single = simulate(m, tuple(x[b] for x in x0), u[:, b])
        np.testing.assert_allclose(tr.outputs[:, b], single.outputs, atol=1e-14, rtol=0)


def test_simulate_default_state_is_zero(rng):
    m = DeepGruModel.random(1, [2], 1, rng)
    tr = simulate(m, None, np.zeros((3, 1)))
    np.testing.assert_array_equal(tr.states[0][0], [0.0, 0.0])


def test_lpv_consistency(rng):
    for _ in range(1000 // 50):
        p = GruLayerParams.random(3, 2, rng, scale=2.0)
        x = rng.uniform(-1, 1, (50, 3))
        u = rng.uniform(-1, 1, (50, 2))
        omega, eta = lpv_coefficients(p, x, u)
        np.testing.assert_allclose(omega * x + (1 - omega) * eta, layer_step(p, x, u)[0], atol=1e-15, rtol=0)
        assert np.all((omega > 0) & (omega < 1)) and np.all((eta > -1) & (eta < 1))
    omega, eta = lpv_coefficients(GruLayerParams.zeros(2, 1), [0.3, -0.2], [0.7])
    assert omega.tolist() == [0.5, 0.5] and eta.tolist() == [0.0, 0.0]


def test_invariant_set_single_and_deep(rng):
    for _ in range(1000 // 100):
        p = GruLayerParams.random(4, 3, rng, scale=3.0)
        x = rng.uniform(-1, 1, (100, 4))
        x[0] = 1.0
        u = rng.uniform(-1, 1, (100, 3))
        assert np.abs(layer_step(p, x, u)[0]).max() <= 1.0
        m = DeepGruModel.random(3, [4, 2], 1, rng, scale=3.0)
        s = tuple(rng.uniform(-1, 1, (100, n)) for n in m.widths)
        assert max(np.abs(v).max() for v in deep_step(m, s, u)) <= 1.0


def test_monotone_decrease_outside_box(rng):
    for _ in range(50):
        p = GruLayerParams.random(3, 2, rng, scale=1.0)
        x0 = rng.uniform(-1, 1, 3)
        x0[rng.integers(3)] = rng.choice([-1, 1]) * rng.uniform(1.5, 5)
        xs = simulate(DeepGruModel((p,), np.zeros((1, 3)), np.zeros(1)), (x0,),
                      rng.uniform(-1, 1, (200, 2))).states[0]
        n = np.abs(xs).max(axis=1)
        outside = n[:-1] > 1
        assert np.all(n[1:][outside] < n[:-1][outside])


def test_shape_validation():
    with pytest.raises(ValueError):
        GruLayerParams.zeros(2, 2).replace(U_z=np.zeros((2, 3)))
    with pytest.raises(ValueError, match="input width"):
        DeepGruModel((GruLayerParams.zeros(2, 1), GruLayerParams.zeros(2, 3)), np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        GruLayerParams.zeros(1, 1).replace(b_z=np.array([np.inf]))


def test_params_are_read_only():
    p = GruLayerParams.zeros(2, 1)
    with pytest.raises(ValueError):
        p.U_r[0, 0] = 1.0


def test_scaler_round_trip():
    s = AffineScaler.from_range([0.0, -2.0], [0.9e-3, 2.0])
    np.testing.assert_allclose(s.normalize([[0.0, -2.0], [0.9e-3, 2.0]]), [[-1, -1], [1, 1]], atol=1e-15)
    x = np.array([[3e-4, 0.1], [7e-4, -1.5]])
    np.testing.assert_allclose(s.denormalize(s.normalize(x)), x, atol=1e-12)
    with pytest.raises(ValueError):
        AffineScaler.from_range([1.0], [1.0])


def test_model_json_round_trip_exact(tmp_path, rng):
    m = DeepGruModel.random(2, [3, 2], 2, rng).replace(input_scaler=AffineScaler.from_range([0, 0], [1, 2]))
    path = tmp_path / "m.json"
    save_model(m, path)
    back = load_model(path)
    assert dumps_model(back) == path.read_text()
    for a, b in zip(back.layers, m.layers):
        for name, arr in a.to_arrays().items():
            assert np.array_equal(arr, getattr(b, name))
    with pytest.raises(ValueError, match="format_version"):
        loads_model('{"format_version": 99}')
