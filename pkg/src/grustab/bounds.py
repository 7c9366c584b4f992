"""Explicit constants behind the stability certificates.

These are the quantities the trajectory checks in :mod:`grustab.verify` test
against: entry times into the invariant box and the exponential envelope
outside it, the ISS decay rate and gains, the incremental-ISS contraction
rate and input gain, and the lower-triangular cascade matrix of a deep
network together with its power-growth constant.

Every decay constant is the tightest value the underlying inequalities admit,
i.e. gate values are set to the worst end of their admissible interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .certificates import delta_iss_residual, gate_bounds, iss_condition
from .gru import DeepGruModel, GruLayerParams
from .numerics import inf_norm_concat, inf_norm_matrix, inf_norm_vector, sigmoid, tanh_act


class NotCertifiedError(ValueError):
    """A bound was requested for weights that fail the matching condition."""


# -- entry into the invariant box --------------------------------------------

@dataclass(frozen=True)
class EntryBound:
    """Gate bounds valid along a trajectory started at ``x0``, and entry times.

    ``k_bar_per_component[j]`` (and ``k_bar``) is ``None`` when the candidate
    saturates in floating point (``eps_under0 == 0``) so no finite entry time
    can be certified.
    """

    omega_bar0: float
    omega_under0: float
    eps_under0: float
    k_bar_per_component: tuple
    k_bar: int | None
    x0_abs: tuple

    def envelope(self, horizon: int) -> np.ndarray:
        """Componentwise upper bound on ``|x_j(k)|`` for ``k = 0..horizon``, shape ``(horizon+1, n)``."""
        k = np.arange(horizon + 1)[:, None]
        x0 = np.asarray(self.x0_abs)[None, :]
        return self.omega_bar0 ** k * x0 + (1.0 - self.omega_under0 ** k) * (1.0 - self.eps_under0)


def entry_bound(p: GruLayerParams, x0, lambda_prev: float = 1.0) -> EntryBound:
    """Bounds for a layer started at ``x0`` whose input never exceeds ``lambda_prev`` in norm."""
    x0 = np.asarray(x0, dtype=np.float64)
    lam = max(inf_norm_vector(x0), 1.0)
    nz = inf_norm_concat([lambda_prev * p.W_z, lam * p.U_z, p.b_z])
    nr = inf_norm_concat([lambda_prev * p.W_r, lam * p.U_r, p.b_r])
    omega_bar = sigmoid(nz)
    omega_under = sigmoid(-nz)
    eps_under = 1.0 - tanh_act(nr)
    rate = omega_under * eps_under
    ks = []
    for xj in np.abs(x0):
        if xj <= 1.0:
            ks.append(0)
        elif rate <= 0.0:
            ks.append(None)
        else:
            ks.append(int(math.ceil((xj - 1.0) / rate)))
    k_bar = None if any(k is None for k in ks) else max(ks, default=0)
    return EntryBound(omega_bar, omega_under, eps_under, tuple(ks), k_bar, tuple(np.abs(x0).tolist()))


def deep_entry_bounds(m: DeepGruModel, x0) -> list[EntryBound]:
    """Per-layer entry bounds; layer ``i`` input is bounded by ``max(||x0^{i-1}||, 1)``."""
    out = []
    lam_prev = 1.0
    for p, xi in zip(m.layers, x0):
        out.append(entry_bound(p, xi, lam_prev))
        lam_prev = max(inf_norm_vector(xi), 1.0)
    return out


# -- ISS ---------------------------------------------------------------------

@dataclass(frozen=True)
class IssBound:
    """``||x(k)|| <= mu (1-delta)^k ||x0|| + gain_u ||u|| + gain_b`` for the layer."""

    delta: float
    gain_u: float
    gain_b: float
    mu: float = 1.0
    sigma_z: float = 0.5
    contraction: float = 0.0

    def evaluate(self, x0_norm, u_norm, k):
        return self.mu * (1.0 - self.delta) ** k * x0_norm + self.gain_u * u_norm + self.gain_b


def iss_bound(p: GruLayerParams, x0=None) -> IssBound:
    """Decay rate and gains of a layer satisfying the ISS condition.

    With ``x0`` outside the unit box, ``mu`` is computed from the entry
    envelope so that the same decay rate also covers the approach to the box.
    """
    lhs, ok = iss_condition(p)
    if not ok:
        raise NotCertifiedError(f"not certified: ISS condition lhs = {lhs!r} >= 1")
    sz = sigmoid(inf_norm_concat([p.W_z, p.U_z, p.b_z]))
    delta = (1.0 - sz) * (1.0 - lhs)
    gain_u = sz * inf_norm_matrix(p.W_r) / delta
    gain_b = sz * inf_norm_vector(p.b_r) / delta
    mu = 1.0
    if x0 is not None and inf_norm_vector(x0) > 1.0:
        mu = _iss_mu(p, np.asarray(x0, dtype=np.float64), delta)
    return IssBound(delta, gain_u, gain_b, mu, sz, lhs)


def _iss_mu(p: GruLayerParams, x0: np.ndarray, delta: float, max_steps: int = 10_000_000) -> float:
    eb = entry_bound(p, x0)
    if eb.k_bar is None:
        raise NotCertifiedError("entry time is unbounded in floating point; no finite mu")
    if eb.k_bar > max_steps:
        raise NotCertifiedError(f"entry time {eb.k_bar} too large to scan for mu")
    n0 = inf_norm_vector(x0)
    k = np.arange(eb.k_bar + 1)
    env = eb.omega_bar0 ** k * n0 + (1.0 - eb.omega_under0 ** k) * (1.0 - eb.eps_under0)
    env = np.minimum(env, n0)  # the norm never grows while outside the box
    log_ratio = np.log(env / n0) - k * math.log1p(-delta)
    return max(1.0, float(np.exp(log_ratio.max())))


# -- incremental ISS ---------------------------------------------------------

@dataclass(frozen=True)
class DeltaIssBound:
    """Pairwise bound ``||dx(k)|| <= mu lt^k ||dx0|| + mu/(1-lt) ||B|| ||du||``.

    For one layer ``A = [[1 - delta_delta]]``, ``B = [alpha_du_sup]`` and
    ``mu = 1``, which reduces to ``(1-dd)^k ||dx0|| + alpha/dd ||du||``.
    """

    delta_delta: tuple
    alpha_du_sup: tuple
    A: np.ndarray
    B: np.ndarray
    lambda_tilde: float
    mu: float

    @property
    def input_gain(self) -> float:
        return self.mu / (1.0 - self.lambda_tilde) * inf_norm_vector(self.B)

    def evaluate(self, dx0_norm, du_norm, k):
        return self.mu * self.lambda_tilde ** k * dx0_norm + self.input_gain * du_norm

    def to_dict(self) -> dict:
        return {
            "delta_delta": list(self.delta_delta),
            "alpha_du_sup": list(self.alpha_du_sup),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "lambda_tilde": self.lambda_tilde,
            "mu": self.mu,
            "input_gain": self.input_gain,
        }


def _layer_delta_constants(p: GruLayerParams, lambda_check: float, lambda_prev: float) -> tuple[float, float]:
    nu = delta_iss_residual(p, lambda_check, lambda_prev)
    if not nu < 0.0:
        raise NotCertifiedError(f"not certified: incremental-ISS residual {nu!r} >= 0")
    gb = gate_bounds(p, lambda_check, lambda_prev)
    lc = gb.lambda_check
    ur = inf_norm_matrix(p.U_r)
    c = ur * (0.25 * lc * inf_norm_matrix(p.U_f) + gb.sigma_f)
    kz = 0.25 * (lc + gb.phi_r)
    # worst case of alpha_dx is z = sigma_z (coefficient 1 - c > 0)
    one_minus_dd = gb.sigma_z * (1.0 - c) + c + kz * inf_norm_matrix(p.U_z)
    # supremum of alpha_du is at the smallest gate value z = 1 - sigma_z
    alpha = kz * inf_norm_matrix(p.W_z) + gb.sigma_z * (
        inf_norm_matrix(p.W_r) + 0.25 * lc * ur * inf_norm_matrix(p.W_f))
    return 1.0 - one_minus_dd, alpha


def delta_iss_bound(p: GruLayerParams, lambda_check: float = 1.0, lambda_prev: float = 1.0) -> DeltaIssBound:
    dd, alpha = _layer_delta_constants(p, lambda_check, lambda_prev)
    return DeltaIssBound((dd,), (alpha,), np.array([[1.0 - dd]]), np.array([alpha]), 1.0 - dd, 1.0)


def cascade_matrices(delta_delta: Sequence[float], alpha: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Lower-triangular ``A`` and vector ``B`` of the layer-norm recursion.

    ``A[i, h] = (1 - dd_h) * prod(alpha[h+1..i])`` for ``h <= i`` and
    ``B[i] = prod(alpha[0..i])``.
    """
    M = len(delta_delta)
    A = np.zeros((M, M))
    for i in range(M):
        for h in range(i + 1):
            A[i, h] = (1.0 - delta_delta[h]) * math.prod(alpha[h + 1:i + 1])
    B = np.array([math.prod(alpha[:i + 1]) for i in range(M)])
    return A, B


def power_growth_constant(A: np.ndarray, rate: float, floor: float = 1e-12, max_power: int = 1_000_000) -> float:
    """``max_k ||A^k|| / rate^k`` scanned until ``||A^k||`` falls below ``floor``."""
    P = np.eye(A.shape[0])
    mu = 1.0
    log_rate = math.log(rate)
    for k in range(1, max_power + 1):
        P = P @ A
        n = inf_norm_matrix(P)
        if n == 0.0:
            break
        mu = max(mu, math.exp(math.log(n) - k * log_rate))
        if n < floor:
            break
    else:
        raise RuntimeError("matrix powers did not decay; is A Schur stable?")
    return mu


def deep_delta_iss_bound(m: DeepGruModel, lambdas: Sequence[float] | None = None) -> DeltaIssBound:
    """Cascade bound for a deep network (relaxed when ``lambdas`` is None)."""
    lam = [1.0] * m.depth if lambdas is None else [float(v) for v in lambdas]
    if len(lam) != m.depth:
        raise ValueError("need one lambda per layer")
    prev = [1.0] + lam[:-1]
    dds, alphas = [], []
    for i, p in enumerate(m.layers):
        try:
            dd, a = _layer_delta_constants(p, lam[i], prev[i])
        except NotCertifiedError as exc:
            raise NotCertifiedError(f"layer {i + 1}: {exc}") from None
        dds.append(dd)
        alphas.append(a)
    A, B = cascade_matrices(dds, alphas)
    lt = max(1.0 - d for d in dds)
    mu = 1.0 if m.depth == 1 else power_growth_constant(A, lt)
    return DeltaIssBound(tuple(dds), tuple(alphas), A, B, lt, mu)
