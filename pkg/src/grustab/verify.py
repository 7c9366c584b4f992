"""Monte-Carlo falsification of the invariance, entry, ISS and incremental-ISS bounds.

Every check samples all of its trials up front from the plan seed, simulates
them as one batch (optionally split across worker threads), and reports the
number of violations, the smallest margin ``bound - observed`` and replayable
witnesses ``(seed, trial)`` for violated trials. Sampling does not depend on
how trials are chunked, so the worker count changes results at most by the
rounding of batched matrix products.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .bounds import NotCertifiedError, deep_delta_iss_bound, deep_entry_bounds, iss_bound
from .certificates import certify_deep, iss_condition
from .gru import DeepGruModel, GruLayerParams, deep_step, simulate
from .numerics import make_rng

MAX_WITNESSES = 10
ENTRY_MAX_HORIZON = 20_000


@dataclass(frozen=True)
class VerificationPlan:
    trials: int = 2000
    horizon: int = 500
    box: str = "inside"            # "inside" the unit box or "inflated" beyond it
    radius: tuple = (1.0, 5.0)     # norm range of inflated initial states
    inputs: str = "uniform"        # "uniform" i.i.d. or "mprs" piecewise constant
    seed: int = 0
    tolerance: float = 1e-9
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.box not in ("inside", "inflated"):
            raise ValueError("box must be 'inside' or 'inflated'")
        if self.inputs not in ("uniform", "mprs"):
            raise ValueError("inputs must be 'uniform' or 'mprs'")


@dataclass
class VerificationOutcome:
    check: str
    trials: int
    violations: int = 0
    worst_margin: float = float("inf")
    witnesses: list = field(default_factory=list)
    skipped: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("GRUSTAB_THREADS", "1")))
    except ValueError:
        return 1


def _as_model(target) -> DeepGruModel:
    if isinstance(target, GruLayerParams):
        return DeepGruModel((target,), np.zeros((1, target.n_x)), np.zeros(1))
    return target


def _outcome(check: str, plan: VerificationPlan, margins: np.ndarray, skipped: int = 0, **extra) -> VerificationOutcome:
    """Fold per-trial margins (negative beyond tolerance = violation)."""
    bad = np.flatnonzero(margins < -plan.tolerance)
    finite = margins[np.isfinite(margins)]
    return VerificationOutcome(
        check=check, trials=int(margins.size), violations=int(bad.size),
        worst_margin=float(finite.min()) if finite.size else float("inf"),
        witnesses=[(plan.seed, int(t)) for t in bad[:MAX_WITNESSES]],
        skipped=skipped, extra=extra)


# -- sampling -------------------------------------------------------------------

def _sample_box(rng, n_trials: int, width: int, radius) -> np.ndarray:
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), (n_trials,))
    return rng.uniform(-1.0, 1.0, (n_trials, width)) * radius[:, None]


def _sample_outside(rng, n_trials: int, width: int, lo: float, hi: float) -> np.ndarray:
    """States with infinity norm uniform in ``(lo, hi]``, attained at a random component."""
    r = hi - (hi - lo) * rng.random(n_trials)  # in (lo, hi]
    x = rng.uniform(-1.0, 1.0, (n_trials, width)) * r[:, None]
    j = rng.integers(width, size=n_trials)
    sign = np.where(rng.random(n_trials) < 0.5, -1.0, 1.0)
    x[np.arange(n_trials), j] = sign * r
    return x


def _sample_inputs(rng, plan: VerificationPlan, n_trials: int, n_u: int, horizon: int) -> np.ndarray:
    if plan.inputs == "uniform":
        return rng.uniform(-1.0, 1.0, (horizon, n_trials, n_u))
    levels = np.linspace(-1.0, 1.0, 5)
    out = np.empty((horizon, n_trials, n_u))
    for t in range(n_trials):
        for c in range(n_u):
            k = 0
            while k < horizon:
                hold = int(rng.integers(10, 50, endpoint=True))
                out[k:k + hold, t, c] = levels[rng.integers(5)]
                k += hold
    return out


def _simulate_chunks(m: DeepGruModel, x0: tuple, inputs: np.ndarray, workers: int) -> list:
    """Per-layer state arrays ``(T, trials, n)``, simulated in trial chunks."""
    n = inputs.shape[1]
    workers = max(1, min(workers, n))
    if workers == 1:
        return simulate(m, x0, inputs).states
    edges = np.linspace(0, n, workers + 1).astype(int)
    parts = [(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]

    def run(ab):
        a, b = ab
        return simulate(m, tuple(x[a:b] for x in x0), inputs[:, a:b]).states

    with ThreadPoolExecutor(max_workers=workers) as ex:
        results = list(ex.map(run, parts))
    return [np.concatenate([r[i] for r in results], axis=1) for i in range(m.depth)]


def _full_states(m: DeepGruModel, x0: tuple, inputs: np.ndarray, workers: int) -> list:
    """States ``x(0..T)`` per layer, shape ``(T+1, trials, n)``."""
    pad = np.concatenate([inputs, inputs[-1:]], axis=0)
    return _simulate_chunks(m, x0, pad, workers)


def _prefix_sup(norms: np.ndarray) -> np.ndarray:
    """``out[k] = max(norms[0..k-1])`` with ``out[0] = 0``; axis 0 is time."""
    out = np.zeros((norms.shape[0] + 1,) + norms.shape[1:])
    np.maximum.accumulate(norms, axis=0, out=out[1:])
    return out


# -- checks ---------------------------------------------------------------------

def verify_invariance(target, plan: VerificationPlan) -> VerificationOutcome:
    """One step from states in the unit box never leaves it (checked exactly)."""
    m = _as_model(target)
    rng = make_rng(plan.seed, 10)
    x = tuple(_sample_box(rng, plan.trials, n, 1.0) for n in m.widths)
    u = rng.uniform(-1.0, 1.0, (plan.trials, m.n_u))
    nxt = deep_step(m, x, u)
    peak = np.max(np.stack([np.abs(xi).max(axis=1) for xi in nxt]), axis=0)
    margins = 1.0 - peak
    bad = np.flatnonzero(margins < 0.0)
    return VerificationOutcome(
        "invariance", plan.trials, int(bad.size), float(margins.min()),
        [(plan.seed, int(t)) for t in bad[:MAX_WITNESSES]])


def verify_entry(target, plan: VerificationPlan, max_horizon: int = ENTRY_MAX_HORIZON) -> VerificationOutcome:
    """Entry into the unit box by the bound time and envelope domination at every step.

    Initial states follow ``plan.box``; with the default inflated sampling
    every layer starts with norm in ``plan.radius``. The horizon is extended
    to cover the largest entry time up to ``max_horizon``; trials whose entry
    time is unbounded or beyond that cap only have the envelope checked and
    are counted as skipped.
    """
    m = _as_model(target)
    rng = make_rng(plan.seed, 11)
    lo, hi = plan.radius
    if plan.box == "inflated":
        x0 = tuple(_sample_outside(rng, plan.trials, n, lo, hi) for n in m.widths)
    else:
        x0 = tuple(_sample_box(rng, plan.trials, n, 1.0) for n in m.widths)
    ebs = [deep_entry_bounds(m, tuple(x[t] for x in x0)) for t in range(plan.trials)]
    k_bars = np.array([[np.inf if e.k_bar is None else e.k_bar for e in eb] for eb in ebs], dtype=np.float64)
    finite = k_bars[np.isfinite(k_bars)]
    horizon = int(min(max(plan.horizon, finite.max() + 1 if finite.size else 0), max_horizon))
    unchecked = (k_bars > horizon).any(axis=1)
    u = _sample_inputs(rng, plan, plan.trials, m.n_u, horizon)

    margins = np.full(plan.trials, np.inf)
    ks = np.arange(horizon + 1)[:, None]
    chunk = max(1, int(2e7 // ((horizon + 1) * max(m.widths))))
    for a in range(0, plan.trials, chunk):
        b = min(a + chunk, plan.trials)
        states = _full_states(m, tuple(x[a:b] for x in x0), u[:, a:b], plan.workers)
        for i, xs in enumerate(states):
            absx = np.abs(xs)  # (H+1, trials, n)
            env = np.stack([ebs[t][i].envelope(horizon) for t in range(a, b)], axis=1)
            env_margin = (env - absx).min(axis=(0, 2))
            norm = absx.max(axis=2)
            after = ks >= k_bars[a:b, i][None, :]
            entry_margin = np.where(after, 1.0 - norm, np.inf).min(axis=0)
            margins[a:b] = np.minimum(margins[a:b], np.minimum(env_margin, entry_margin))
    return _outcome("entry", plan, margins, skipped=int(unchecked.sum()),
                    max_k_bar=float(k_bars.max()), horizon=horizon)


def verify_iss_bound(target, plan: VerificationPlan) -> VerificationOutcome:
    """Per-layer ISS bound ``mu (1-d)^k ||x0|| + g_u sup||u|| + g_b`` along simulated runs.

    Layers of a deep network are checked with their actual inputs (the
    successor states of the layer below), which lie in the unit box. Inflated
    initial states are supported for single-layer targets only.
    """
    m = _as_model(target)
    for i, p in enumerate(m.layers):
        lhs, ok = iss_condition(p)
        if not ok:
            raise NotCertifiedError(f"layer {i + 1} is not ISS-certified (lhs = {lhs!r})")
    if plan.box == "inflated" and m.depth > 1:
        raise ValueError("inflated ISS checks are defined for single layers only")
    rng = make_rng(plan.seed, 12)
    if plan.box == "inflated":
        x0 = (_sample_outside(rng, plan.trials, m.widths[0], *plan.radius),)
    else:
        x0 = tuple(_sample_box(rng, plan.trials, n, 1.0) for n in m.widths)
    u = _sample_inputs(rng, plan, plan.trials, m.n_u, plan.horizon)
    states = _full_states(m, x0, u, plan.workers)

    k = np.arange(plan.horizon + 1)[:, None]
    margins = np.full(plan.trials, np.inf)
    layer_in = np.abs(u).max(axis=2)  # ||u^1(t)||, (H, trials)
    for i, p in enumerate(m.layers):
        xs = states[i]
        norm = np.abs(xs).max(axis=2)
        x0n = norm[0]
        b = iss_bound(p)
        if plan.box == "inflated":
            mu = np.array([iss_bound(p, x0[0][t]).mu for t in range(plan.trials)])
        else:
            mu = np.ones(plan.trials)
        usup = _prefix_sup(layer_in)
        bound = mu[None, :] * (1.0 - b.delta) ** k * x0n[None, :] + b.gain_u * usup + b.gain_b
        margins = np.minimum(margins, (bound - norm).min(axis=0))
        layer_in = norm[1:]
    return _outcome("iss_bound", plan, margins)


def verify_delta_iss_bound(target, plan: VerificationPlan, lambdas=None) -> VerificationOutcome:
    """Pairwise incremental-ISS bound plus initial-condition forgetting.

    Initial states come from the unit box, or for an inflated plan from the
    boxes ``||x^i|| <= lambdas[i]``, which needs the strict certificate.
    """
    m = _as_model(target)
    if plan.box == "inflated" and lambdas is None:
        raise ValueError("inflated sampling needs the strict certificate: pass lambdas")
    mode = "delta_iss_relaxed" if lambdas is None else "delta_iss_strict"
    rep = certify_deep(m, mode, lambdas)
    if not rep.all_delta_iss:
        raise NotCertifiedError(f"model is not incrementally-ISS certified: residuals {rep.residuals}")
    bnd = deep_delta_iss_bound(m, lambdas)
    rng = make_rng(plan.seed, 13)
    n = plan.trials
    radii = lambdas if plan.box == "inflated" else [1.0] * m.depth
    xa = tuple(_sample_box(rng, n, w, lam) for w, lam in zip(m.widths, radii))
    xb = tuple(_sample_box(rng, n, w, lam) for w, lam in zip(m.widths, radii))
    ua = _sample_inputs(rng, plan, n, m.n_u, plan.horizon)
    ub = _sample_inputs(rng, plan, n, m.n_u, plan.horizon)

    # batch layout: [a | b | b driven by u_a]
    x0 = tuple(np.concatenate([a, b, b]) for a, b in zip(xa, xb))
    u = np.concatenate([ua, ub, ua], axis=1)
    states = _full_states(m, x0, u, plan.workers)

    def split(xs):
        return xs[:, :n], xs[:, n:2 * n], xs[:, 2 * n:]

    dx_pair = np.max(np.stack([np.abs(a - b).max(axis=2) for a, b, _ in map(split, states)]), axis=0)
    dx_same = np.max(np.stack([np.abs(a - c).max(axis=2) for a, _, c in map(split, states)]), axis=0)
    du = np.abs(ua - ub).max(axis=2)  # (H, n)

    H = plan.horizon
    pair_margin = _pair_margin(bnd, dx_pair, du)
    same_margin = _pair_margin(bnd, dx_same, np.zeros_like(du))
    margins = np.minimum(pair_margin, same_margin)
    return _outcome("delta_iss_bound", plan, margins,
                    pair_worst_margin=float(pair_margin.min()),
                    forgetting_worst_margin=float(same_margin.min()),
                    final_same_input_gap=float(dx_same[H].max()),
                    lambda_tilde=bnd.lambda_tilde, mu=bnd.mu, input_gain=bnd.input_gain)


def _pair_margin(bnd, dx: np.ndarray, du: np.ndarray) -> np.ndarray:
    """Per trial, min over k of the incremental bound minus the observed gap ``dx[k]``."""
    k = np.arange(dx.shape[0])[:, None]
    bound = bnd.mu * bnd.lambda_tilde ** k * dx[0][None, :] + bnd.input_gain * _prefix_sup(du)[: dx.shape[0]]
    return (bound - dx).min(axis=0)
