"""Certificates and explicit bounds of a small deep GRU, checked by simulation.

Run: python3 demos/bounds_walkthrough.py
"""

import numpy as np

from grustab.bounds import deep_delta_iss_bound, deep_entry_bounds, iss_bound
from grustab.certificates import certify_deep
from grustab.gru import DeepGruModel, GruLayerParams, simulate
from grustab.numerics import make_rng
from grustab.verify import VerificationPlan, verify_delta_iss_bound, verify_entry


def small_model(rng):
    layers = (GruLayerParams.random(4, 2, rng, scale=0.08, bias_scale=0.1),
              GruLayerParams.random(3, 4, rng, scale=0.08, bias_scale=0.1))
    return DeepGruModel(layers, rng.uniform(-1, 1, (1, 3)), np.zeros(1))


def main():
    rng = make_rng(42)
    m = small_model(rng)
    report = certify_deep(m)
    print(report.render())

    for i, p in enumerate(m.layers, 1):
        b = iss_bound(p)
        print(f"layer {i}: ISS decay 1-delta = {1 - b.delta:.4f}, input gain {b.gain_u:.4f}, bias gain {b.gain_b:.4f}")

    d = deep_delta_iss_bound(m)
    print(f"incremental bound: lambda_tilde = {d.lambda_tilde:.4f}, mu = {d.mu:.4f}, input gain = {d.input_gain:.4f}")

    # two runs from different initial states under the same input forget their initial gap
    u = rng.uniform(-1, 1, (60, 2))
    xa = tuple(rng.uniform(-1, 1, n) for n in m.widths)
    xb = tuple(rng.uniform(-1, 1, n) for n in m.widths)
    sa, sb = simulate(m, xa, u).states, simulate(m, xb, u).states
    gap = np.max([np.abs(a - b).max(axis=1) for a, b in zip(sa, sb)], axis=0)
    bound = d.mu * d.lambda_tilde ** np.arange(len(gap)) * gap[0]
    for k in (0, 5, 10, 20, 40, 59):
        print(f"k={k:>2}: gap {gap[k]:.3e} <= bound {bound[k]:.3e}")

    x0 = tuple(np.full(n, 3.0) for n in m.widths)
    print("entry times from ||x0|| = 3:", [e.k_bar for e in deep_entry_bounds(m, x0)])

    plan = VerificationPlan(trials=500, horizon=200, seed=1)
    for o in (verify_entry(m, VerificationPlan(trials=500, box="inflated", seed=1)),
              verify_delta_iss_bound(m, plan)):
        print(f"{o.check}: {o.trials} trials, {o.violations} violations, worst margin {o.worst_margin:.3e}")


if __name__ == "__main__":
    main()
