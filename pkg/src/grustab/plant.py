"""Quadruple-tank benchmark: plant model, excitation, datasets.

Levels are in metres, flows in m^3/s. The integrator is fixed-step RK4 with
levels clamped to ``[0, cap]``; a clamp at the top models overflow (excess
water is discarded).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .gru import AffineScaler
from .io import atomic_write_text, read_json, write_json
from .numerics import make_rng

log = logging.getLogger(__name__)

CSV_HEADER = "k,q_a,q_b,h1,h2"
DATASET_FORMAT_VERSION = 1
LOW_LEVEL = 3e-3   # m; steps this close to an empty or full tank are subdivided
REFINE = 16


@dataclass(frozen=True)
class TankConfig:
    a1: float = 1.31e-4
    a2: float = 1.51e-4
    a3: float = 9.27e-5
    a4: float = 8.82e-5
    S: float = 0.06
    gamma_a: float = 0.3
    gamma_b: float = 0.4
    g: float = 9.81
    q_a_max: float = 0.9e-3
    q_b_max: float = 1.1e-3
    h_max: tuple = (1.36, 1.36, 1.3, 1.3)

    def __post_init__(self):
        if min(self.a1, self.a2, self.a3, self.a4, self.S) <= 0:
            raise ValueError("areas must be positive")
        if not (0 < self.gamma_a < 1 and 0 < self.gamma_b < 1):
            raise ValueError("split ratios must lie in (0, 1)")
        if len(self.h_max) != 4 or min(self.h_max) <= 0:
            raise ValueError("level caps must be four positive numbers")

    @property
    def caps(self) -> np.ndarray:
        return np.asarray(self.h_max, dtype=np.float64)

    def clamp_flows(self, q_a, q_b):
        return np.clip(q_a, 0.0, self.q_a_max), np.clip(q_b, 0.0, self.q_b_max)

    def equilibrium(self, q_a: float, q_b: float) -> np.ndarray:
        """Steady levels for constant flows, ignoring the caps."""
        two_g = 2.0 * self.g
        h3 = ((1 - self.gamma_b) * q_b / self.a3) ** 2 / two_g
        h4 = ((1 - self.gamma_a) * q_a / self.a4) ** 2 / two_g
        h1 = ((self.gamma_a * q_a + (1 - self.gamma_b) * q_b) / self.a1) ** 2 / two_g
        h2 = ((self.gamma_b * q_b + (1 - self.gamma_a) * q_a) / self.a2) ** 2 / two_g
        return np.array([h1, h2, h3, h4])


def _rates(cfg: TankConfig, h: np.ndarray, q_a, q_b) -> np.ndarray:
    out = np.sqrt(2.0 * cfg.g * h)
    S = cfg.S
    dh = np.empty_like(h)
    dh[..., 0] = (-cfg.a1 * out[..., 0] + cfg.a3 * out[..., 2] + cfg.gamma_a * q_a) / S
    dh[..., 1] = (-cfg.a2 * out[..., 1] + cfg.a4 * out[..., 3] + cfg.gamma_b * q_b) / S
    dh[..., 2] = (-cfg.a3 * out[..., 2] + (1 - cfg.gamma_b) * q_b) / S
    dh[..., 3] = (-cfg.a4 * out[..., 3] + (1 - cfg.gamma_a) * q_a) / S
    return dh


def tank_derivative(cfg: TankConfig, h, q_a, q_b) -> np.ndarray:
    """Level rates (m/s) for levels ``h = (h1, h2, h3, h4)`` and clamped pump flows."""
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0):
        raise ValueError("levels must be nonnegative")
    q_a, q_b = cfg.clamp_flows(q_a, q_b)
    return _rates(cfg, h, q_a, q_b)


def integrate(cfg: TankConfig, h0, flows, tau_s: float = 15.0, internal_step: float = 1.0) -> np.ndarray:
    """Sampled levels under a zero-order-hold flow schedule.

    Args:
        h0: initial levels, shape ``(..., 4)``.
        flows: ``(T, ..., 2)`` array; ``flows[k]`` is held over ``[k tau_s, (k+1) tau_s)``.

    Returns:
        Levels at the ``T + 1`` sampling instants, shape ``(T + 1, ..., 4)``.
    """
    if internal_step <= 0 or internal_step > 1.0:
        raise ValueError("internal_step must be in (0, 1] s")
    n_sub = max(1, math.ceil(tau_s / internal_step - 1e-9))
    dt = tau_s / n_sub
    caps = cfg.caps
    flows = np.asarray(flows, dtype=np.float64)
    h = np.clip(np.asarray(h0, dtype=np.float64), 0.0, caps)
    shape = h.shape
    h = h.reshape(-1, 4)
    q = flows.reshape(flows.shape[0], -1, 2)
    out = np.empty((flows.shape[0] + 1,) + shape)
    out[0] = h.reshape(shape)

    def f(state, qa, qb):
        return _rates(cfg, np.clip(state, 0.0, caps), qa, qb)

    def rk4(h, qa, qb, dt, k1):
        k2 = f(h + 0.5 * dt * k1, qa, qb)
        k3 = f(h + 0.5 * dt * k2, qa, qb)
        k4 = f(h + dt * k3, qa, qb)
        h_new = np.clip(h + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), 0.0, caps)
        return h_new, np.minimum.reduce([k1, k2, k3, k4]), np.maximum.reduce([k1, k2, k3, k4])

    fine = dt / REFINE
    for k in range(q.shape[0]):
        qa, qb = cfg.clamp_flows(q[k, :, 0], q[k, :, 1])
        for _ in range(n_sub):
            h_next, k_lo, k_hi = rk4(h, qa, qb, dt, f(h, qa, qb))
            # the dynamics have kinks at an empty tank (sqrt outflow) and at the
            # overflow cap: steps near a bound, or crossing one, take REFINE smaller steps
            near = (
                ((h < LOW_LEVEL) & ((h > 0.0) | (k_hi > 0.0)))
                | ((h > caps - LOW_LEVEL) & ((h < caps) | (k_lo < 0.0)))
                | (((h <= 0.0) | (h >= caps)) != ((h_next <= 0.0) | (h_next >= caps)))
            ).any(axis=1)
            if near.any():
                hf, qaf, qbf = h[near], qa[near], qb[near]
                for _ in range(REFINE):
                    hf = rk4(hf, qaf, qbf, fine, f(hf, qaf, qbf))[0]
                h_next[near] = hf
            h = h_next
        if not np.all(np.isfinite(h)):
            raise FloatingPointError(f"non-finite plant state at sample {k + 1}")
        out[k + 1] = h.reshape(shape)
    return out


def mprs(levels: int, hold_range: tuple[int, int], value_range: tuple[float, float], length: int,
         rng: np.random.Generator) -> np.ndarray:
    """Multilevel pseudo-random signal of ``length`` samples.

    Each segment takes one of ``levels`` evenly spaced values in ``value_range``
    and is held for an integer number of samples drawn from ``hold_range``
    (inclusive).
    """
    if levels < 2:
        raise ValueError("need at least two levels")
    lo_hold, hi_hold = hold_range
    if lo_hold < 1 or hi_hold < lo_hold:
        raise ValueError("invalid hold range")
    values = np.linspace(value_range[0], value_range[1], levels)
    out = np.empty(length)
    k = 0
    while k < length:
        hold = int(rng.integers(lo_hold, hi_hold, endpoint=True))
        out[k:k + hold] = values[rng.integers(levels)]
        k += hold
    return out


@dataclass
class Experiment:
    id: str
    tau_s: float
    inputs: np.ndarray
    outputs: np.ndarray
    units: str = "physical"
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.outputs = np.asarray(self.outputs, dtype=np.float64)
        if self.inputs.shape[0] != self.outputs.shape[0]:
            raise ValueError("input and output sequences must have the same length")

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Protocol:
    n_experiments: int = 30
    length: int = 1500
    tau_s: float = 15.0
    input_noise_std: float = 5e-6
    output_noise_std: float = 0.005
    splits: tuple = (20, 5, 5)
    mprs_levels: int = 5
    hold_range: tuple = (10, 50)
    internal_step: float = 1.0
    noise_on: str = "record"

    def __post_init__(self):
        if sum(self.splits) != self.n_experiments:
            raise ValueError("split sizes must sum to the number of experiments")
        if self.noise_on not in ("record", "plant"):
            raise ValueError("noise_on must be 'record' or 'plant'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = list(self.splits)
        d["hold_range"] = list(self.hold_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Protocol":
        d = dict(d)
        if "splits" in d:
            d["splits"] = tuple(d["splits"])
        if "hold_range" in d:
            d["hold_range"] = tuple(d["hold_range"])
        return cls(**d)


SPLIT_NAMES = ("train", "validation", "test")


@dataclass
class Dataset:
    experiments: list
    protocol: Protocol = field(default_factory=Protocol)
    seed: int = 0
    config: TankConfig = field(default_factory=TankConfig)
    input_scaler: AffineScaler | None = None
    output_scaler: AffineScaler | None = None

    def split(self, name: str) -> list:
        return [e for e in self.experiments if e.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def validation(self):
        return self.split("validation")

    @property
    def test(self):
        return self.split("test")


def generate_dataset(cfg: TankConfig, protocol: Protocol, seed: int) -> Dataset:
    """Simulate every experiment, add noise, assign splits and fit scalers.

    Experiment ``l`` draws from its own stream ``(seed, l)``; the first
    ``splits[0]`` experiments train, the next ``splits[1]`` validate, the
    rest test. Each run starts at rest at the equilibrium of its first flows.
    """
    N, T = protocol.n_experiments, protocol.length
    flows = np.empty((T, N, 2))
    h0 = np.empty((N, 4))
    rngs = [make_rng(seed, l) for l in range(N)]
    for l, rng in enumerate(rngs):
        flows[:, l, 0] = mprs(protocol.mprs_levels, protocol.hold_range, (0.0, cfg.q_a_max), T, rng)
        flows[:, l, 1] = mprs(protocol.mprs_levels, protocol.hold_range, (0.0, cfg.q_b_max), T, rng)
        h0[l] = np.minimum(cfg.equilibrium(flows[0, l, 0], flows[0, l, 1]), cfg.caps)
    in_noise = np.stack([rng.standard_normal((T, 2)) for rng in rngs], axis=1) * protocol.input_noise_std
    out_noise = np.stack([rng.standard_normal((T, 2)) for rng in rngs], axis=1) * protocol.output_noise_std
    if protocol.noise_on == "plant":
        drive = flows + in_noise
        recorded = drive
    else:
        drive = flows
        recorded = flows + in_noise
    levels = integrate(cfg, h0, drive, protocol.tau_s, protocol.internal_step)[:T]
    outputs = levels[..., :2] + out_noise

    labels = [name for name, n in zip(SPLIT_NAMES, protocol.splits) for _ in range(n)]
    exps = [Experiment(f"exp_{l:03d}", protocol.tau_s, recorded[:, l], outputs[:, l], "physical", labels[l])
            for l in range(N)]
    d = Dataset(exps, protocol, seed, cfg)
    d.input_scaler, d.output_scaler = fit_scalers(d)
    return d


def fit_scalers(d: Dataset) -> tuple[AffineScaler, AffineScaler]:
    """Min/max scalers of the training split, mapping each channel onto [-1, 1]."""
    train = d.train
    if not train:
        raise ValueError("training split is empty")
    u = np.concatenate([e.inputs for e in train])
    y = np.concatenate([e.outputs for e in train])
    return AffineScaler.from_range(u.min(0), u.max(0)), AffineScaler.from_range(y.min(0), y.max(0))


def normalize_experiment(e: Experiment, input_scaler: AffineScaler, output_scaler: AffineScaler,
                         clip: bool = True) -> tuple[Experiment, int]:
    """Normalised copy of ``e`` and the number of input samples clipped into [-1, 1]."""
    u = input_scaler.normalize(e.inputs)
    y = output_scaler.normalize(e.outputs)
    n_clipped = 0
    if clip:
        outside = np.abs(u) > 1.0
        n_clipped = int(outside.sum())
        if n_clipped:
            log.warning("%s: clipped %d input samples into [-1, 1]", e.id, n_clipped)
            u = np.clip(u, -1.0, 1.0)
    return replace(e, inputs=u, outputs=y, units="normalized"), n_clipped


def normalized_splits(d: Dataset) -> dict:
    """``{split: [normalised experiments]}`` using the dataset scalers."""
    out = {name: [] for name in SPLIT_NAMES}
    for e in d.experiments:
        out[e.split].append(normalize_experiment(e, d.input_scaler, d.output_scaler)[0])
    return out


# -- on-disk format -----------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def experiment_csv(e: Experiment) -> str:
    lines = [CSV_HEADER]
    for k in range(len(e)):
        qa, qb = e.inputs[k]
        h1, h2 = e.outputs[k]
        lines.append(f"{k},{_fmt(qa)},{_fmt(qb)},{_fmt(h1)},{_fmt(h2)}")
    return "\n".join(lines) + "\n"


def parse_experiment_csv(text: str, exp_id: str, tau_s: float, split: str) -> Experiment:
    lines = text.strip("\n").split("\n")
    if lines[0] != CSV_HEADER:
        raise ValueError(f"{exp_id}: unexpected header {lines[0]!r}")
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]]).reshape(-1, 5)
    if not np.array_equal(rows[:, 0], np.arange(rows.shape[0])):
        raise ValueError(f"{exp_id}: sample index column is not 0..T-1")
    return Experiment(exp_id, tau_s, rows[:, 1:3], rows[:, 3:5], "physical", split)


def dataset_meta(d: Dataset) -> dict:
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": d.seed,
        "protocol": d.protocol.to_dict(),
        "plant": {**asdict(d.config), "h_max": list(d.config.h_max)},
        "units": {"inputs": "m^3/s", "outputs": "m"},
        "columns": CSV_HEADER.split(","),
        "splits": {e.id: e.split for e in d.experiments},
        "input_scaler": d.input_scaler.to_dict() if d.input_scaler else None,
        "output_scaler": d.output_scaler.to_dict() if d.output_scaler else None,
        "overflow": "levels clamped to [0, cap]; overflow discarded",
        "input_noise_placement": d.protocol.noise_on,
        "initial_state": "equilibrium of the first applied flows, clamped to caps",
    }


def save_dataset(d: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for e in d.experiments:
        atomic_write_text(directory / f"{e.id}.csv", experiment_csv(e))
    write_json(directory / "meta.json", dataset_meta(d))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    meta = read_json(directory / "meta.json")
    if meta.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format_version {meta.get('format_version')!r}")
    protocol = Protocol.from_dict(meta["protocol"])
    plant = dict(meta["plant"])
    plant["h_max"] = tuple(plant["h_max"])
    exps = []
    for exp_id, split in meta["splits"].items():
        text = (directory / f"{exp_id}.csv").read_text(encoding="utf-8")
        exps.append(parse_experiment_csv(text, exp_id, protocol.tau_s, split))
    d = Dataset(exps, protocol, meta["seed"], TankConfig(**plant))
    if meta.get("input_scaler") and meta.get("output_scaler"):
        d.input_scaler = AffineScaler.from_dict(meta["input_scaler"])
        d.output_scaler = AffineScaler.from_dict(meta["output_scaler"])
    else:
        d.input_scaler, d.output_scaler = fit_scalers(d)
    return d
