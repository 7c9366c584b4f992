"""Sufficient ISS / incremental-ISS conditions on GRU weights.

Every condition reduces to infinity norms of weight blocks pushed through the
activations. ``lambda_check`` is the radius of the box the layer's state is
initialised in (1 means the invariant box ``[-1, 1]^n``) and ``lambda_prev``
bounds the layer input (1 for the first layer, which sees normalised inputs).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .gru import DeepGruModel, GruLayerParams
from .numerics import inf_norm_concat, inf_norm_matrix, sigmoid, tanh_act

MODES = ("iss", "delta_iss_strict", "delta_iss_relaxed")


@dataclass(frozen=True)
class LayerBounds:
    """Gate bounds of one layer over its admissible state/input box."""

    sigma_z: float
    sigma_f: float
    phi_r: float
    lambda_check: float = 1.0
    lambda_prev: float = 1.0

    @property
    def relaxed(self) -> bool:
        return self.lambda_check == 1.0 and self.lambda_prev == 1.0


def gate_bounds(p: GruLayerParams, lambda_check: float = 1.0, lambda_prev: float = 1.0) -> LayerBounds:
    if lambda_check < 1.0 or lambda_prev < 1.0:
        raise ValueError("lambda_check and lambda_prev must be >= 1")
    lc, lp = lambda_check, lambda_prev
    return LayerBounds(
        sigma_z=sigmoid(inf_norm_concat([lp * p.W_z, lc * p.U_z, p.b_z])),
        sigma_f=sigmoid(inf_norm_concat([lp * p.W_f, lc * p.U_f, p.b_f])),
        phi_r=tanh_act(inf_norm_concat([lp * p.W_r, lc * p.U_r, p.b_r])),
        lambda_check=float(lc),
        lambda_prev=float(lp),
    )


def iss_condition(p: GruLayerParams) -> tuple[float, bool]:
    """``||U_r|| * sigmoid(||[W_f U_f b_f]||)``; the layer is ISS if this is < 1."""
    lhs = inf_norm_matrix(p.U_r) * sigmoid(inf_norm_concat([p.W_f, p.U_f, p.b_f]))
    return float(lhs), bool(lhs < 1.0)


def delta_iss_residual(p: GruLayerParams, lambda_check: float = 1.0, lambda_prev: float = 1.0) -> float:
    """Signed margin of the incremental-ISS condition; negative certifies."""
    b = gate_bounds(p, lambda_check, lambda_prev)
    lc = b.lambda_check
    # 1 - sigma_z as sigmoid(-N): exact where sigma_z itself rounds to 1
    one_sz = sigmoid(-inf_norm_concat([b.lambda_prev * p.W_z, lc * p.U_z, p.b_z]))
    uz = inf_norm_matrix(p.U_z)
    z_term = 0.0 if uz == 0.0 else (np.inf if one_sz == 0.0 else 0.25 * (lc + b.phi_r) / one_sz * uz)
    nu = inf_norm_matrix(p.U_r) * (0.25 * lc * inf_norm_matrix(p.U_f) + b.sigma_f) - 1.0 + z_term
    return float(nu)


def relaxed_delta_iss_residual(p: GruLayerParams) -> float:
    return delta_iss_residual(p, 1.0, 1.0)


@dataclass
class LayerCertificate:
    layer: int
    iss_lhs: float
    iss_certified: bool
    delta_iss_residual: float
    delta_iss_certified: bool
    relaxed: bool
    lambda_check: float
    lambda_prev: float
    sigma_z: float
    sigma_f: float
    phi_r: float


@dataclass
class StabilityReport:
    mode: str
    layers: list
    all_iss: bool
    all_delta_iss: bool
    bounds: dict = field(default_factory=dict)
    empirical: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.all_iss if self.mode == "iss" else self.all_delta_iss

    @property
    def residuals(self) -> list[float]:
        return [c.delta_iss_residual for c in self.layers]

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "certified": self.certified,
            "all_iss": self.all_iss,
            "all_delta_iss": self.all_delta_iss,
            "layers": [asdict(c) for c in self.layers],
        }
        if self.bounds:
            d["bounds"] = self.bounds
        if self.empirical:
            d["empirical"] = self.empirical
        return d

    def render(self) -> str:
        head = f"{'layer':>5} {'iss_lhs':>12} {'iss':>4} {'nu':>12} {'dISS':>5} {'lam':>6} {'lam_prev':>8}"
        lines = [f"mode: {self.mode}", head]
        for c in self.layers:
            lines.append(
                f"{c.layer:>5} {c.iss_lhs:>12.6g} {'yes' if c.iss_certified else 'no':>4} "
                f"{c.delta_iss_residual:>12.6g} {'yes' if c.delta_iss_certified else 'no':>5} "
                f"{c.lambda_check:>6.3g} {c.lambda_prev:>8.3g}")
        lines.append(f"network ISS: {self.all_iss}   network dISS: {self.all_delta_iss}")
        return "\n".join(lines)


def _layer_lambdas(m: DeepGruModel, mode: str, lambdas: Sequence[float] | None) -> list[tuple[float, float]]:
    if mode == "delta_iss_strict":
        if lambdas is None or len(lambdas) != m.depth:
            raise ValueError("strict mode needs one lambda per layer")
        lam = [float(v) for v in lambdas]
        if min(lam) < 1.0:
            raise ValueError("lambdas must be >= 1")
        prev = [1.0] + lam[:-1]
        return list(zip(lam, prev))
    return [(1.0, 1.0)] * m.depth


def certify_deep(m: DeepGruModel, mode: str = "delta_iss_relaxed",
                 lambdas: Sequence[float] | None = None) -> StabilityReport:
    """Evaluate the per-layer conditions; the network is certified iff every layer is."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    certs = []
    for i, (p, (lc, lp)) in enumerate(zip(m.layers, _layer_lambdas(m, mode, lambdas)), start=1):
        lhs, iss_ok = iss_condition(p)
        gb = gate_bounds(p, lc, lp)
        nu = delta_iss_residual(p, lc, lp)
        certs.append(LayerCertificate(
            layer=i, iss_lhs=lhs, iss_certified=iss_ok,
            delta_iss_residual=nu, delta_iss_certified=bool(nu < 0.0),
            relaxed=gb.relaxed, lambda_check=lc, lambda_prev=lp,
            sigma_z=gb.sigma_z, sigma_f=gb.sigma_f, phi_r=gb.phi_r))
    return StabilityReport(
        mode=mode, layers=certs,
        all_iss=all(c.iss_certified for c in certs),
        all_delta_iss=all(c.delta_iss_certified for c in certs))


def residuals(m: DeepGruModel) -> np.ndarray:
    """Relaxed incremental-ISS residuals of every layer."""
    return np.array([relaxed_delta_iss_residual(p) for p in m.layers])
