"""Stability-penalised training of deep GRU models.

The loss of one sequence is the washed-out open-loop MSE plus a piecewise
linear penalty on each layer's relaxed incremental-ISS residual. Gradients are
exact backpropagation through time for the MSE and subgradients through the
infinity norms for the penalty. Updates are RMSProp, one sequence per step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .certificates import residuals
from .gru import PARAM_NAMES, AffineScaler, DeepGruModel, GruLayerParams, simulate
from .numerics import make_rng, sigmoid, tanh_act

# stream ids under the run seed
_INIT, _SHUFFLE, _TRAIN_X0, _VAL_X0 = 0, 1, 2, 3


class DivergenceError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class InfeasibleError(RuntimeError):
    """Constrained training never produced a model meeting the residual clearance."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class TrainConfig:
    washout: int = 20
    rho_plus: float = 2e-4
    rho_minus: float = 2e-6
    eps_nu: float = 0.05
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 0
    truncation: int | None = None
    init_scale: float = 1.0

    def __post_init__(self):
        if self.rho_minus > self.rho_plus:
            raise ValueError("rho_minus must not exceed rho_plus")
        if self.eps_nu <= 0:
            raise ValueError("eps_nu must be positive")
        if self.washout < 0:
            raise ValueError("washout must be nonnegative")

    @property
    def constrained(self) -> bool:
        return self.rho_plus > 0 or self.rho_minus > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# -- parameter sets ------------------------------------------------------------

def param_dict(m: DeepGruModel) -> dict:
    """Flat ``{path: array}`` view, e.g. ``layers.0.W_z``, ``U_o``."""
    out = {}
    for i, p in enumerate(m.layers):
        for name in PARAM_NAMES:
            out[f"layers.{i}.{name}"] = getattr(p, name)
    out["U_o"] = m.U_o
    out["b_o"] = m.b_o
    return out


def with_params(m: DeepGruModel, params: dict) -> DeepGruModel:
    layers = []
    for i in range(m.depth):
        layers.append(GruLayerParams(**{n: params[f"layers.{i}.{n}"] for n in PARAM_NAMES}))
    return m.replace(layers=tuple(layers), U_o=params["U_o"], b_o=params["b_o"])


def init_model(n_u: int, widths: Sequence[int], n_o: int, rng: np.random.Generator,
               input_scaler: AffineScaler | None = None,
               output_scaler: AffineScaler | None = None, scale: float = 1.0) -> DeepGruModel:
    """Weights uniform in ``+-scale/sqrt(fan_in)`` per matrix, zero biases."""
    layers, prev = [], n_u
    for n in widths:
        arrays = {}
        for name in PARAM_NAMES:
            if name[0] == "b":
                arrays[name] = np.zeros(n)
            else:
                fan_in = prev if name[0] == "W" else n
                a = scale / math.sqrt(fan_in)
                arrays[name] = rng.uniform(-a, a, (n, fan_in))
        layers.append(GruLayerParams(**arrays))
        prev = n
    a = 1.0 / math.sqrt(prev)
    return DeepGruModel(tuple(layers), rng.uniform(-a, a, (n_o, prev)), np.zeros(n_o),
                        input_scaler, output_scaler)


# -- penalty -------------------------------------------------------------------

def penalty(nu: float, cfg: TrainConfig) -> float:
    e = cfg.eps_nu
    return cfg.rho_plus * (max(nu, -e) + e) + cfg.rho_minus * (min(nu, -e) + e)


def penalty_slope(nu: float, cfg: TrainConfig) -> float:
    # right-hand slope at the kink
    return cfg.rho_plus if nu >= -cfg.eps_nu else cfg.rho_minus


def _norm_subgrad(blocks: Sequence[np.ndarray], scales: Sequence[float]) -> tuple[float, list[np.ndarray]]:
    """``||[s1 B1, s2 B2, ...]||_inf`` and its subgradient with respect to each ``Bj``.

    The gradient is routed to the first row attaining the maximum row sum.
    """
    cols = [s * (b[:, None] if b.ndim == 1 else b) for b, s in zip(blocks, scales)]
    row_sums = sum(np.abs(c).sum(axis=1) for c in cols)
    i = int(np.argmax(row_sums))
    grads = []
    for b, s in zip(blocks, scales):
        g = np.zeros_like(b)
        g[i] = s * np.sign(b[i])
        grads.append(g)
    return float(row_sums[i]), grads


def residual_and_grad(p: GruLayerParams, lambda_check: float = 1.0,
                      lambda_prev: float = 1.0) -> tuple[float, dict]:
    """Incremental-ISS residual of a layer and its subgradient per weight name."""
    lc, lp = lambda_check, lambda_prev
    R, (gR,) = _norm_subgrad([p.U_r], [1.0])
    F, (gF,) = _norm_subgrad([p.U_f], [1.0])
    Z, (gZ,) = _norm_subgrad([p.U_z], [1.0])
    Nz, (gNz_W, gNz_U, gNz_b) = _norm_subgrad([p.W_z, p.U_z, p.b_z], [lp, lc, 1.0])
    Nf, (gNf_W, gNf_U, gNf_b) = _norm_subgrad([p.W_f, p.U_f, p.b_f], [lp, lc, 1.0])
    Nr, (gNr_W, gNr_U, gNr_b) = _norm_subgrad([p.W_r, p.U_r, p.b_r], [lp, lc, 1.0])
    sf, sz, pr = sigmoid(Nf), sigmoid(Nz), tanh_act(Nr)
    one_sz = sigmoid(-Nz)
    nu = R * (0.25 * lc * F + sf) - 1.0 + 0.25 * (lc + pr) / one_sz * Z

    d_R = 0.25 * lc * F + sf
    d_F = 0.25 * lc * R
    d_Nf = R * sf * (1.0 - sf)
    d_Z = 0.25 * (lc + pr) / one_sz
    d_Nr = 0.25 * Z * (1.0 - pr * pr) / one_sz
    d_Nz = 0.25 * (lc + pr) * Z * sz / one_sz  # d/dN [1/(1-sigmoid(N))] = sigmoid(N)/(1-sigmoid(N))
    grads = {
        "W_z": d_Nz * gNz_W, "U_z": d_Z * gZ + d_Nz * gNz_U, "b_z": d_Nz * gNz_b,
        "W_f": d_Nf * gNf_W, "U_f": d_F * gF + d_Nf * gNf_U, "b_f": d_Nf * gNf_b,
        "W_r": d_Nr * gNr_W, "U_r": d_R * gR + d_Nr * gNr_U, "b_r": d_Nr * gNr_b,
    }
    return float(nu), grads


# -- BPTT ------------------------------------------------------------------------

@dataclass
class _LayerCache:
    inputs: np.ndarray  # (T, n_u)
    X: np.ndarray       # (T+1, n)
    Z: np.ndarray
    F: np.ndarray
    R: np.ndarray


def _layer_forward(p: GruLayerParams, x0: np.ndarray, inputs: np.ndarray) -> _LayerCache:
    T, n = inputs.shape[0], p.n_x
    X = np.empty((T + 1, n))
    Z = np.empty((T, n))
    F = np.empty((T, n))
    R = np.empty((T, n))
    az_u = inputs @ p.W_z.T + p.b_z
    af_u = inputs @ p.W_f.T + p.b_f
    ar_u = inputs @ p.W_r.T + p.b_r
    UzT, UfT, UrT = p.U_z.T, p.U_f.T, p.U_r.T
    x = np.asarray(x0, dtype=np.float64)
    X[0] = x
    for k in range(T):
        z = sigmoid(az_u[k] + x @ UzT)
        f = sigmoid(af_u[k] + x @ UfT)
        r = np.tanh(ar_u[k] + (f * x) @ UrT)
        x = z * x + (1.0 - z) * r
        Z[k], F[k], R[k], X[k + 1] = z, f, r, x
    return _LayerCache(inputs, X, Z, F, R)


def _layer_backward(p: GruLayerParams, c: _LayerCache, dX: np.ndarray,
                    truncation: int | None = None) -> tuple[dict, np.ndarray]:
    """Gradients of a layer given loss gradients ``dX`` on its states ``X[0..T]``."""
    T, n = c.Z.shape
    DAZ = np.empty((T, n))
    DAF = np.empty((T, n))
    DAR = np.empty((T, n))
    Uz, Uf, Ur = p.U_z, p.U_f, p.U_r
    carry = np.zeros(n)
    for k in range(T - 1, -1, -1):
        if truncation and (k + 1) % truncation == 0:
            carry = np.zeros(n)
        dxn = dX[k + 1] + carry
        z, f, r, x = c.Z[k], c.F[k], c.R[k], c.X[k]
        dar = dxn * (1.0 - z) * (1.0 - r * r)
        dg = dar @ Ur
        daf = dg * x * f * (1.0 - f)
        daz = dxn * (x - r) * z * (1.0 - z)
        carry = dxn * z + dg * f + daf @ Uf + daz @ Uz
        DAZ[k], DAF[k], DAR[k] = daz, daf, dar
    Xk = c.X[:T]
    grads = {
        "W_z": DAZ.T @ c.inputs, "U_z": DAZ.T @ Xk, "b_z": DAZ.sum(0),
        "W_f": DAF.T @ c.inputs, "U_f": DAF.T @ Xk, "b_f": DAF.sum(0),
        "W_r": DAR.T @ c.inputs, "U_r": DAR.T @ (c.F * Xk), "b_r": DAR.sum(0),
    }
    d_inputs = DAZ @ p.W_z + DAF @ p.W_f + DAR @ p.W_r
    return grads, d_inputs


def _mse_weights(T: int, washout: int) -> float:
    if T <= washout:
        raise ValueError(f"sequence length {T} must exceed the washout {washout}")
    return 1.0 / (T - washout)


def mse(pred: np.ndarray, target: np.ndarray, washout: int) -> float:
    w = _mse_weights(pred.shape[0], washout)
    err = pred[washout:] - target[washout:]
    return float(w * np.sum(err * err))


def random_initial_state(m: DeepGruModel, rng: np.random.Generator) -> tuple:
    return tuple(rng.uniform(-1.0, 1.0, n) for n in m.widths)


@dataclass
class LossParts:
    mse: float
    penalties: list
    residuals: list

    @property
    def total(self) -> float:
        return self.mse + sum(self.penalties)


def sequence_loss(m: DeepGruModel, inputs, targets, cfg: TrainConfig, x0=None,
                  rng: np.random.Generator | None = None) -> tuple[float, LossParts]:
    """Loss of one normalised sequence; ``x0`` defaults to a random state in the unit box."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    _mse_weights(inputs.shape[0], cfg.washout)
    if x0 is None:
        x0 = random_initial_state(m, rng if rng is not None else make_rng(cfg.seed, _TRAIN_X0))
    pred = simulate(m, x0, inputs).outputs
    nus = [float(v) for v in residuals(m)]
    parts = LossParts(mse(pred, targets, cfg.washout), [penalty(v, cfg) for v in nus], nus)
    return parts.total, parts


def gradients(m: DeepGruModel, inputs, targets, cfg: TrainConfig, x0) -> tuple[float, LossParts, dict]:
    """Loss, its parts, and the gradient for every entry of :func:`param_dict`."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    T = inputs.shape[0]
    w = _mse_weights(T, cfg.washout)

    caches = []
    layer_in = inputs
    for p, xi in zip(m.layers, x0):
        c = _layer_forward(p, xi, layer_in)
        caches.append(c)
        layer_in = c.X[1:]
    XM = caches[-1].X[:T]
    pred = XM @ m.U_o.T + m.b_o
    err = pred - targets
    err[:cfg.washout] = 0.0
    mse_val = float(w * np.sum(err * err))
    dy = 2.0 * w * err

    grads = {"U_o": dy.T @ XM, "b_o": dy.sum(0)}
    dX = np.zeros((T + 1, m.layers[-1].n_x))
    dX[:T] = dy @ m.U_o
    for i in range(m.depth - 1, -1, -1):
        g, d_in = _layer_backward(m.layers[i], caches[i], dX, cfg.truncation)
        for name, v in g.items():
            grads[f"layers.{i}.{name}"] = v
        if i > 0:
            dX = np.zeros((T + 1, m.layers[i - 1].n_x))
            dX[1:] = d_in

    nus, pens = [], []
    for i, p in enumerate(m.layers):
        nu, gnu = residual_and_grad(p)
        nus.append(nu)
        pens.append(penalty(nu, cfg))
        slope = penalty_slope(nu, cfg)
        if slope:
            for name, v in gnu.items():
                grads[f"layers.{i}.{name}"] = grads[f"layers.{i}.{name}"] + slope * v

    parts = LossParts(mse_val, pens, nus)
    for key, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(f"non-finite gradient for {key}")
    return parts.total, parts, grads


def finite_difference_gradients(m: DeepGruModel, inputs, targets, cfg: TrainConfig, x0,
                                step: float = 1e-5) -> dict:
    """Central-difference estimate of :func:`gradients`, one parameter entry at a time."""
    params = param_dict(m)
    out = {}
    for key, theta in params.items():
        g = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            vals = []
            for sign in (1.0, -1.0):
                pert = theta.copy()
                pert[idx] += sign * step
                vals.append(sequence_loss(with_params(m, {**params, key: pert}), inputs, targets, cfg, x0)[0])
            g[idx] = (vals[0] - vals[1]) / (2.0 * step)
        out[key] = g
    return out


def gradient_relative_error(exact: dict, approx: dict, floor: float = 1e-10) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over all entries."""
    worst = 0.0
    for key, a in exact.items():
        b = approx[key]
        den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / den)))
    return worst


# -- optimiser ------------------------------------------------------------------

class RMSProp:
    """``s <- d s + (1-d) g^2;  theta <- theta - lr g / (sqrt(s) + eps)``."""

    def __init__(self, params: dict, lr: float = 1e-3, decay: float = 0.9, eps: float = 1e-8):
        self.lr, self.decay, self.eps = lr, decay, eps
        self.acc = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> dict:
        out = {}
        for k, theta in params.items():
            g = grads[k]
            s = self.acc[k]
            s *= self.decay
            s += (1.0 - self.decay) * g * g
            out[k] = theta - self.lr * g / (np.sqrt(s) + self.eps)
        return out


# -- training loop ----------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    nu: list

    def feasible(self, eps_nu: float) -> bool:
        return all(v < -eps_nu for v in self.nu)


@dataclass
class TrainResult:
    model: DeepGruModel
    history: list
    best_epoch: int
    stopped_early: bool

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: Sequence[EpochRecord]) -> str:
    M = len(history[0].nu) if history else 0
    lines = ["epoch,train_loss,val_mse," + ",".join(f"nu_{i + 1}" for i in range(M))]
    for r in history:
        vals = [str(r.epoch), repr(r.train_loss), repr(r.val_mse)] + [repr(v) for v in r.nu]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def validation_mse(m: DeepGruModel, sequences: Sequence[tuple], x0s: Sequence[tuple], washout: int) -> float:
    if not sequences:
        return float("nan")
    vals = [mse(simulate(m, x0, u).outputs, y, washout) for (u, y), x0 in zip(sequences, x0s)]
    return float(np.mean(vals))


def train(train_seqs: Sequence[tuple], val_seqs: Sequence[tuple], widths: Sequence[int],
          cfg: TrainConfig, input_scaler: AffineScaler | None = None,
          output_scaler: AffineScaler | None = None,
          callback: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train on normalised ``(inputs, targets)`` pairs.

    Stops once every residual is below ``-eps_nu`` (when the penalty is active)
    and the validation MSE has not improved for ``patience`` epochs. Returns
    the best-validation snapshot among epochs meeting the residual clearance.
    """
    if not train_seqs:
        raise ValueError("no training sequences")
    n_u = train_seqs[0][0].shape[1]
    n_o = train_seqs[0][1].shape[1]
    model = init_model(n_u, widths, n_o, make_rng(cfg.seed, _INIT), input_scaler, output_scaler,
                       cfg.init_scale)
    shuffle_rng = make_rng(cfg.seed, _SHUFFLE)
    x0_rng = make_rng(cfg.seed, _TRAIN_X0)
    val_rng = make_rng(cfg.seed, _VAL_X0)
    val_x0 = [random_initial_state(model, val_rng) for _ in val_seqs]

    params = param_dict(model)
    opt = RMSProp(params, cfg.learning_rate, cfg.rms_decay, cfg.rms_eps)
    history: list[EpochRecord] = []
    best, best_val, best_epoch = None, math.inf, 0
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for idx in shuffle_rng.permutation(len(train_seqs)):
            u, y = train_seqs[idx]
            x0 = random_initial_state(model, x0_rng)
            loss, _, grads = gradients(model, u, y, cfg, x0)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", history)
            params = opt.step(params, grads)
            model = with_params(model, params)
            losses.append(loss)
        val = validation_mse(model, val_seqs, val_x0, cfg.washout) if val_seqs else float(np.mean(losses))
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation MSE at epoch {epoch}", history)
        rec = EpochRecord(epoch, float(np.mean(losses)), val, [float(v) for v in residuals(model)])
        history.append(rec)
        if callback is not None:
            callback(rec)
        feasible = rec.feasible(cfg.eps_nu) or not cfg.constrained
        if feasible and val < best_val:
            best, best_val, best_epoch = model, val, epoch
        if feasible and best is not None and epoch - best_epoch >= cfg.patience:
            stopped_early = True
            break
    if best is None:
        raise InfeasibleError(
            f"no epoch met the residual clearance nu < -{cfg.eps_nu} within {cfg.max_epochs} epochs", history)
    return TrainResult(best, history, best_epoch, stopped_early)


# -- evaluation -----------------------------------------------------------------

def fit_percent(pred, target) -> float:
    """``100 (1 - ||pred - y|| / ||y - mean(y)||)`` over the whole stacked sequence."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    denom = np.linalg.norm(target - target.mean(axis=0))
    if denom == 0.0:
        raise ValueError("constant output sequence: FIT is undefined")
    return float(100.0 * (1.0 - np.linalg.norm(pred - target) / denom))


def predict(m: DeepGruModel, inputs, x0=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Open-loop prediction from ``x0`` or, by default, a random state in the unit box."""
    if x0 is None:
        x0 = random_initial_state(m, rng if rng is not None else make_rng(0, _VAL_X0))
    return simulate(m, x0, inputs).outputs


def fit_index(m: DeepGruModel, inputs, targets, x0=None, rng: np.random.Generator | None = None) -> float:
    """FIT (percent) of the model's open-loop simulation on one normalised sequence."""
    return fit_percent(predict(m, inputs, x0, rng), targets)
