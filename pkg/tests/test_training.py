import math

import numpy as np
import pytest

from grustab.gru import DeepGruModel, GruLayerParams
from grustab.numerics import make_rng
from grustab.training import (DivergenceError, InfeasibleError, RMSProp, TrainConfig, finite_difference_gradients,
                              fit_index, fit_percent, gradient_relative_error, gradients, history_csv, init_model,
                              mse, param_dict, penalty, residual_and_grad, sequence_loss, train, with_params)
from grustab.certificates import relaxed_delta_iss_residual

CFG = TrainConfig()


def toy_sequences(n, T, rng, n_u=2, n_o=2):
    """Sequences produced by a small teacher GRU, so a student can fit them."""
    teacher = init_model(n_u, [3], n_o, make_rng(99), scale=0.5)
    from grustab.gru import simulate
    seqs = []
    for _ in range(n):
        u = rng.uniform(-1, 1, (T, n_u))
        seqs.append((u, simulate(teacher, (np.zeros(3),), u).outputs))
    return seqs


# -- penalty ------------------------------------------------------------------

def test_penalty_oracle_values():
    assert abs(penalty(0.95, CFG) - 2e-4) < 1e-15
    assert abs(penalty(-1.0, CFG) - (-1.9e-6)) < 1e-15
    assert penalty(-0.05, CFG) == 0.0


def test_penalty_shape():
    nus = np.linspace(-3, 3, 2001)
    vals = np.array([penalty(v, CFG) for v in nus])
    assert np.all(np.diff(vals) >= 0)
    above = nus > -0.05 + 1e-9
    below = nus < -0.05 - 1e-9
    np.testing.assert_allclose(vals[above], 2e-4 * (nus[above] + 0.05), rtol=1e-12, atol=1e-18)
    np.testing.assert_allclose(vals[below], 2e-6 * (nus[below] + 0.05), rtol=1e-12, atol=1e-18)
    # continuity at the kink
    assert abs(penalty(-0.05 + 1e-12, CFG) - penalty(-0.05 - 1e-12, CFG)) < 1e-15


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(rho_plus=1e-6, rho_minus=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(eps_nu=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rat": 1.0})
    assert TrainConfig.from_dict(CFG.to_dict()) == CFG
    assert not TrainConfig(rho_plus=0, rho_minus=0).constrained


# -- loss ---------------------------------------------------------------------

def test_zero_model_penalty_term():
    m = DeepGruModel.zeros(2, [4, 3, 2], 2)
    u = np.zeros((40, 2))
    _, parts = sequence_loss(m, u, np.zeros((40, 2)), CFG, x0=tuple(np.zeros(n) for n in m.widths))
    assert parts.residuals == [-1.0, -1.0, -1.0]
    assert abs(sum(parts.penalties) - 3 * 2e-6 * (-1 + 0.05)) < 1e-18


def test_washout_invariance(rng):
    m = init_model(2, [4], 2, rng)
    u = rng.uniform(-1, 1, (50, 2))
    y = rng.normal(size=(50, 2))
    x0 = (rng.uniform(-1, 1, 4),)
    y2 = y.copy()
    y2[:CFG.washout] += 100.0
    assert sequence_loss(m, u, y, CFG, x0)[1].mse == sequence_loss(m, u, y2, CFG, x0)[1].mse


def test_sequence_shorter_than_washout():
    m = init_model(1, [2], 1, make_rng(0))
    with pytest.raises(ValueError):
        sequence_loss(m, np.zeros((20, 1)), np.zeros((20, 1)), CFG)


# -- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("seed,widths,scale", [(0, [5, 5], 1.0), (1, [3], 0.5), (2, [4, 3, 2], 1.5)])
def test_gradients_match_finite_differences(seed, widths, scale):
    rng = make_rng(seed)
    m = init_model(2, widths, 2, rng, scale=scale)
    m = m.replace(layers=tuple(p.replace(b_z=rng.uniform(-0.5, 0.5, p.n_x), b_r=rng.uniform(-0.5, 0.5, p.n_x))
                               for p in m.layers), b_o=rng.uniform(-0.5, 0.5, 2))
    u = rng.uniform(-1, 1, (30, 2))
    y = rng.uniform(-1, 1, (30, 2))
    x0 = tuple(rng.uniform(-1, 1, n) for n in widths)
    cfg = TrainConfig(washout=5, rho_plus=0.1, rho_minus=0.01)
    _, parts, g = gradients(m, u, y, cfg, x0)
    assert all(abs(v + cfg.eps_nu) > 1e-3 for v in parts.residuals)
    fd = finite_difference_gradients(m, u, y, cfg, x0)
    assert gradient_relative_error(g, fd) < 1e-4


def test_truncated_gradients_differ_only_by_truncation(rng):
    m = init_model(2, [3], 2, rng)
    u, y = rng.uniform(-1, 1, (40, 2)), rng.uniform(-1, 1, (40, 2))
    x0 = (np.zeros(3),)
    full = gradients(m, u, y, CFG, x0)[2]
    huge = gradients(m, u, y, TrainConfig(truncation=1000), x0)[2]
    short = gradients(m, u, y, TrainConfig(truncation=5), x0)[2]
    for k in full:
        np.testing.assert_array_equal(full[k], huge[k])
    assert not np.allclose(full["layers.0.U_z"], short["layers.0.U_z"])


def test_readout_gradient_closed_form(rng):
    m = DeepGruModel.zeros(2, [3], 2).replace(U_o=rng.normal(size=(2, 3)), b_o=rng.normal(size=2))
    T, Tw = 30, 5
    cfg = TrainConfig(washout=Tw, rho_plus=0, rho_minus=0)
    u, y = rng.uniform(-1, 1, (T, 2)), rng.normal(size=(T, 2))
    x0 = (rng.uniform(-1, 1, 3),)
    # zero weights: every gate is 1/2 and the candidate is 0, so x(k) = x0 / 2^k
    X = np.array([x0[0] * 0.5 ** k for k in range(T)])
    err = X @ m.U_o.T + m.b_o - y
    err[:Tw] = 0
    g = gradients(m, u, y, cfg, x0)[2]
    np.testing.assert_allclose(g["U_o"], 2.0 / (T - Tw) * err.T @ X, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g["b_o"], 2.0 / (T - Tw) * err.sum(0), rtol=1e-12, atol=1e-15)


def test_residual_subgradient_matches_finite_differences():
    rng = make_rng(5)
    p = GruLayerParams.random(4, 3, rng, scale=0.4)
    nu, g = residual_and_grad(p)
    assert nu == pytest.approx(relaxed_delta_iss_residual(p), rel=1e-13)
    assert abs(nu + CFG.eps_nu) > 0.1
    h = 1e-5
    for name in g:
        arr = getattr(p, name)
        for idx in np.ndindex(arr.shape):
            vals = []
            for s in (1, -1):
                a = arr.copy()
                a[idx] += s * h
                vals.append(penalty(relaxed_delta_iss_residual(p.replace(**{name: a})), CFG))
            fd = (vals[0] - vals[1]) / (2 * h)
            exact = CFG.rho_plus * g[name][idx] if nu > -CFG.eps_nu else CFG.rho_minus * g[name][idx]
            assert abs(fd - exact) <= 1e-4 * max(abs(fd), abs(exact), 1e-9)


def test_nonfinite_gradient_names_parameter(rng):
    m = init_model(1, [2], 1, rng)
    y = np.zeros((25, 1))
    y[-1] = np.nan
    with pytest.raises(DivergenceError, match="U_o"):
        gradients(m, np.zeros((25, 1)), y, CFG, (np.full(2, 0.5),))


# -- optimiser and training loop --------------------------------------------------

def test_rmsprop_update_rule():
    opt = RMSProp({"a": np.zeros(2)}, lr=0.1, decay=0.9, eps=1e-8)
    out = opt.step({"a": np.array([1.0, 2.0])}, {"a": np.array([0.5, -2.0])})
    s = 0.1 * np.array([0.25, 4.0])
    np.testing.assert_allclose(out["a"], [1.0, 2.0] - 0.1 * np.array([0.5, -2.0]) / (np.sqrt(s) + 1e-8))
    np.testing.assert_allclose(opt.acc["a"], s)


def test_init_model_ranges():
    m = init_model(3, [4, 2], 2, make_rng(0), scale=0.5)
    for p, fan in zip(m.layers, [3, 4]):
        assert np.abs(p.W_z).max() <= 0.5 / math.sqrt(fan)
        assert np.abs(p.U_r).max() <= 0.5 / math.sqrt(p.n_x)
        assert not p.b_f.any()


def test_unconstrained_training_reduces_loss_and_is_deterministic():
    seqs = toy_sequences(4, 60, make_rng(3))
    cfg = TrainConfig(rho_plus=0, rho_minus=0, max_epochs=15, learning_rate=1e-2, washout=10, seed=4)
    a = train(seqs[:3], seqs[3:], [3], cfg)
    b = train(seqs[:3], seqs[3:], [3], cfg)
    assert a.history[-1].train_loss < a.history[0].train_loss
    assert history_csv(a.history) == history_csv(b.history)
    for k, v in param_dict(a.model).items():
        np.testing.assert_array_equal(v, param_dict(b.model)[k])
    assert a.history[a.best_epoch - 1].val_mse == min(r.val_mse for r in a.history)


def test_constrained_training_returns_feasible_snapshot():
    seqs = toy_sequences(4, 60, make_rng(3))
    cfg = TrainConfig(max_epochs=20, learning_rate=1e-2, washout=10, init_scale=0.1, patience=3)
    res = train(seqs[:3], seqs[3:], [3, 3], cfg)
    assert all(v < -cfg.eps_nu for v in res.history[res.best_epoch - 1].nu)
    assert all(relaxed_delta_iss_residual(p) < -cfg.eps_nu for p in res.model.layers)


def test_infeasible_training_raises():
    seqs = toy_sequences(2, 40, make_rng(3))
    # large initial weights with a tiny learning rate never reach the clearance
    cfg = TrainConfig(max_epochs=3, learning_rate=1e-6, washout=10, init_scale=3.0)
    with pytest.raises(InfeasibleError) as info:
        train(seqs[:1], seqs[1:], [3], cfg)
    assert len(info.value.history) == 3


def test_divergence_is_reported():
    seqs = toy_sequences(2, 40, make_rng(3))
    bad = [(seqs[0][0], seqs[0][1] * np.nan)]
    with pytest.raises(DivergenceError):
        train(bad, [], [2], TrainConfig(rho_plus=0, rho_minus=0, washout=10))


# -- FIT --------------------------------------------------------------------------

def test_fit_percent_examples():
    y = np.column_stack([np.sin(np.arange(50)), np.cos(np.arange(50))])
    assert fit_percent(y, y) == 100.0
    assert fit_percent(np.broadcast_to(y.mean(0), y.shape), y) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        fit_percent(y, np.ones_like(y))


def test_fit_index_is_seeded():
    m = init_model(2, [3], 2, make_rng(0))
    u = make_rng(1).uniform(-1, 1, (40, 2))
    y = make_rng(2).normal(size=(40, 2))
    assert fit_index(m, u, y, rng=make_rng(7)) == fit_index(m, u, y, rng=make_rng(7))


def test_with_params_roundtrip(rng):
    m = init_model(2, [3, 2], 1, rng)
    m2 = with_params(m, param_dict(m))
    assert mse(np.ones((30, 1)), np.zeros((30, 1)), 10) == 1.0
    for k, v in param_dict(m2).items():
        np.testing.assert_array_equal(v, param_dict(m)[k])
