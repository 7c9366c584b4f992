import numpy as np
import pytest

from grustab.plant import (CSV_HEADER, Protocol, TankConfig, experiment_csv, fit_scalers, generate_dataset,
                           integrate, load_dataset, mprs, normalize_experiment, normalized_splits,
                           parse_experiment_csv, save_dataset, tank_derivative)
from grustab.numerics import make_rng

CFG = TankConfig()
SMALL = Protocol(n_experiments=3, length=60, splits=(1, 1, 1))


def test_table_parameters():
    assert CFG.a1 == 1.31e-4 and CFG.a2 == 1.51e-4 and CFG.a3 == 9.27e-5 and CFG.a4 == 8.82e-5
    assert CFG.S == 0.06 and CFG.gamma_a == 0.3 and CFG.gamma_b == 0.4
    assert CFG.q_a_max == 0.9e-3 and CFG.q_b_max == 1.1e-3
    assert CFG.h_max == (1.36, 1.36, 1.3, 1.3)


def test_derivative_at_rest_is_zero():
    assert np.array_equal(tank_derivative(CFG, np.zeros(4), 0.0, 0.0), np.zeros(4))


def test_h3_equilibrium_oracle():
    qb = 0.4e-3
    h3 = ((1 - 0.4) * qb / 9.27e-5) ** 2 / (2 * 9.81)
    rates = tank_derivative(CFG, [0.1, 0.1, h3, 0.1], 0.0, qb)
    assert abs(rates[2]) < 1e-15


def test_equilibrium_is_stationary():
    h = CFG.equilibrium(0.45e-3, 0.55e-3)
    np.testing.assert_allclose(tank_derivative(CFG, h, 0.45e-3, 0.55e-3), 0.0, atol=1e-15)


def test_derivative_rejects_negative_levels():
    with pytest.raises(ValueError):
        tank_derivative(CFG, [-0.1, 0, 0, 0], 0, 0)


def test_flows_are_saturated():
    a = tank_derivative(CFG, np.zeros(4), 5e-3, 5e-3)
    b = tank_derivative(CFG, np.zeros(4), CFG.q_a_max, CFG.q_b_max)
    assert np.array_equal(a, b)


def test_step_to_equilibrium():
    for qa, qb in [(0.45e-3, 0.55e-3), (0.3e-3, 0.3e-3), (0.6e-3, 0.7e-3)]:
        flows = np.tile([qa, qb], (1500, 1))
        h = integrate(CFG, np.zeros(4), flows)[-1]
        eq = CFG.equilibrium(qa, qb)
        assert np.all(np.abs(h - eq) / eq < 1e-3)


def test_step_halving_convergence():
    rng = make_rng(3)
    flows = np.stack([mprs(5, (10, 50), (0, CFG.q_a_max), 300, rng),
                      mprs(5, (10, 50), (0, CFG.q_b_max), 300, rng)], axis=1)
    h0 = CFG.equilibrium(*flows[0]).clip(0, CFG.caps)
    a = integrate(CFG, h0, flows, internal_step=1.0)
    b = integrate(CFG, h0, flows, internal_step=0.5)
    assert np.abs(a - b).max() < 1e-6


def test_zero_inflow_drains_monotonically():
    h = integrate(CFG, [1.2, 0.9, 1.0, 0.4], np.zeros((400, 2)))
    volume = CFG.S * h.sum(axis=1)
    assert np.all(np.diff(volume) <= 0)
    assert np.all(np.diff(h, axis=0) <= 0)
    assert h[-1].max() < 1e-2


def test_levels_stay_within_caps():
    h = integrate(CFG, np.zeros(4), np.tile([CFG.q_a_max, CFG.q_b_max], (2000, 1)))
    assert h.min() >= 0.0 and np.all(h <= CFG.caps)
    np.testing.assert_array_equal(h[-1, 2:], CFG.caps[2:])


def test_integrate_batched_matches_single():
    rng = make_rng(4)
    flows = rng.uniform(0, 1e-3, (50, 3, 2))
    h0 = rng.uniform(0, 1, (3, 4))
    batched = integrate(CFG, h0, flows)
    for i in range(3):
        np.testing.assert_array_equal(batched[:, i], integrate(CFG, h0[i], flows[:, i]))


def test_mprs_properties():
    rng = make_rng(5)
    s = mprs(2, (3, 6), (-1.0, 1.0), 500, rng)
    assert set(np.unique(s)) <= {-1.0, 1.0}
    s = mprs(5, (10, 50), (0.0, 1.0), 1000, rng)
    assert set(np.unique(s)) <= set(np.linspace(0, 1, 5))
    changes = np.flatnonzero(np.diff(s)) + 1
    holds = np.diff(np.concatenate([[0], changes]))
    assert holds.min() >= 10  # equal consecutive levels merge, so only a lower bound holds
    assert np.array_equal(mprs(5, (10, 50), (0, 1), 200, make_rng(9)), mprs(5, (10, 50), (0, 1), 200, make_rng(9)))
    with pytest.raises(ValueError):
        mprs(1, (10, 50), (0, 1), 10, rng)


def test_default_protocol_shape():
    p = Protocol()
    assert (p.n_experiments, p.length, p.splits, p.tau_s) == (30, 1500, (20, 5, 5), 15.0)
    d = generate_dataset(CFG, p, 0)
    assert len(d.experiments) == 30
    assert all(e.inputs.shape == (1500, 2) and e.outputs.shape == (1500, 2) for e in d.experiments)
    assert (len(d.train), len(d.validation), len(d.test)) == (20, 5, 5)


def test_desk_protocol_splits():
    d = generate_dataset(CFG, Protocol(n_experiments=6, length=300, splits=(4, 1, 1)), 0)
    assert (len(d.train), len(d.validation), len(d.test)) == (4, 1, 1)
    assert all(len(e) == 300 for e in d.experiments)


def test_zero_noise_equals_simulation():
    p = Protocol(n_experiments=4, length=60, splits=(2, 1, 1), input_noise_std=0.0, output_noise_std=0.0)
    d = generate_dataset(CFG, p, 1)
    e = d.experiments[0]
    h0 = np.minimum(CFG.equilibrium(*e.inputs[0]), CFG.caps)
    np.testing.assert_array_equal(e.outputs, integrate(CFG, h0, e.inputs)[:60, :2])


def test_noise_placement_switch():
    rec = generate_dataset(CFG, SMALL, 2)
    plant = generate_dataset(CFG, Protocol(**{**SMALL.__dict__, "noise_on": "plant"}), 2)
    np.testing.assert_array_equal(rec.experiments[0].inputs, plant.experiments[0].inputs)
    assert not np.array_equal(rec.experiments[0].outputs, plant.experiments[0].outputs)


def test_dataset_deterministic():
    a = generate_dataset(CFG, SMALL, 7)
    b = generate_dataset(CFG, SMALL, 7)
    c = generate_dataset(CFG, SMALL, 8)
    assert all(experiment_csv(x) == experiment_csv(y) for x, y in zip(a.experiments, b.experiments))
    assert experiment_csv(a.experiments[0]) != experiment_csv(c.experiments[0])


def test_scalers_from_train_split():
    d = generate_dataset(CFG, SMALL, 0)
    i, o = fit_scalers(d)
    u = d.train[0].inputs
    np.testing.assert_allclose(i.normalize(u).min(0), -1, atol=1e-12)
    np.testing.assert_allclose(i.normalize(u).max(0), 1, atol=1e-12)
    for e in d.experiments:
        np.testing.assert_allclose(o.denormalize(o.normalize(e.outputs)), e.outputs, atol=1e-12)


def test_normalize_clips_and_counts(caplog):
    d = generate_dataset(CFG, SMALL, 0)
    i, o = fit_scalers(d)
    e = d.test[0]
    e.inputs[0] = [CFG.q_a_max * 2, 0.0]
    ne, n = normalize_experiment(e, i, o)
    assert n >= 1 and np.abs(ne.inputs).max() <= 1.0
    assert "clipped" in caplog.text
    assert all(np.abs(x.inputs).max() <= 1.0 for xs in normalized_splits(d).values() for x in xs)


def test_csv_and_dataset_round_trip(tmp_path):
    d = generate_dataset(CFG, SMALL, 0)
    text = experiment_csv(d.experiments[0])
    assert text.splitlines()[0] == CSV_HEADER
    back = parse_experiment_csv(text, "x", 15.0, "train")
    assert np.array_equal(back.inputs, d.experiments[0].inputs)
    save_dataset(d, tmp_path / "ds")
    d2 = load_dataset(tmp_path / "ds")
    assert [e.split for e in d2.experiments] == [e.split for e in d.experiments]
    assert np.array_equal(d2.input_scaler.gain, d.input_scaler.gain)
    save_dataset(d2, tmp_path / "ds2")
    for name in ("meta.json", "exp_000.csv", "exp_002.csv"):
        assert (tmp_path / "ds" / name).read_bytes() == (tmp_path / "ds2" / name).read_bytes()
