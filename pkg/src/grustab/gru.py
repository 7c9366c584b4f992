"""State-space GRU networks: single-layer step, deep cascade, readout, LPV form.

A layer advances as::

    z  = sigmoid(W_z u + U_z x + b_z)
    f  = sigmoid(W_f u + U_f x + b_f)
    r  = tanh(W_r u + U_r (f * x) + b_r)
    x+ = z * x + (1 - z) * r

and in a deep network layer ``i > 1`` is fed the *successor* state of layer
``i - 1``. All step functions accept a leading batch dimension on ``x`` and
``u`` so Monte-Carlo sweeps run vectorised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import as_matrix, as_vector, sigmoid, tanh_act

FORMAT_VERSION = 1
UNITY_TOL = 1e-12

PARAM_NAMES = ("W_z", "U_z", "b_z", "W_f", "U_f", "b_f", "W_r", "U_r", "b_r")

GruState = tuple  # one np.ndarray per layer, each (..., n_x^i)


@dataclass(frozen=True, eq=False)
class GruLayerParams:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_f: np.ndarray
    U_f: np.ndarray
    b_f: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray

    def __post_init__(self):
        for gate in "zfr":
            W = as_matrix(getattr(self, f"W_{gate}"), f"W_{gate}")
            U = as_matrix(getattr(self, f"U_{gate}"), f"U_{gate}")
            b = as_vector(getattr(self, f"b_{gate}"), f"b_{gate}")
            for name, arr in ((f"W_{gate}", W), (f"U_{gate}", U), (f"b_{gate}", b)):
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
        n_x, n_u = self.W_z.shape
        for gate in "zfr":
            if getattr(self, f"W_{gate}").shape != (n_x, n_u):
                raise ValueError(f"W_{gate} must be {(n_x, n_u)}")
            if getattr(self, f"U_{gate}").shape != (n_x, n_x):
                raise ValueError(f"U_{gate} must be {(n_x, n_x)}")
            if getattr(self, f"b_{gate}").shape != (n_x,):
                raise ValueError(f"b_{gate} must have length {n_x}")

    @property
    def n_x(self) -> int:
        return self.W_z.shape[0]

    @property
    def n_u(self) -> int:
        return self.W_z.shape[1]

    @classmethod
    def zeros(cls, n_x: int, n_u: int) -> "GruLayerParams":
        return cls(**{
            name: np.zeros((n_x,) if name[0] == "b" else (n_x, n_u if name[0] == "W" else n_x))
            for name in PARAM_NAMES
        })

    @classmethod
    def random(cls, n_x: int, n_u: int, rng: np.random.Generator,
               scale: float = 1.0, bias_scale: float | None = None) -> "GruLayerParams":
        """Entries uniform in ``[-scale, scale]`` (biases in ``[-bias_scale, bias_scale]``)."""
        if bias_scale is None:
            bias_scale = scale
        arrays = {}
        for name in PARAM_NAMES:
            if name[0] == "b":
                arrays[name] = rng.uniform(-bias_scale, bias_scale, n_x)
            elif name[0] == "W":
                arrays[name] = rng.uniform(-scale, scale, (n_x, n_u))
            else:
                arrays[name] = rng.uniform(-scale, scale, (n_x, n_x))
        return cls(**arrays)

    def replace(self, **changes) -> "GruLayerParams":
        arrays = self.to_arrays()
        arrays.update(changes)
        return GruLayerParams(**arrays)

    def to_arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}


@dataclass(frozen=True, eq=False)
class AffineScaler:
    """Per-channel map ``normalized = gain * physical + offset``."""

    gain: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        gain = as_vector(self.gain, "gain")
        offset = as_vector(self.offset, "offset")
        if gain.shape != offset.shape:
            raise ValueError("gain and offset must have the same length")
        if np.any(gain == 0):
            raise ValueError("scaler gains must be nonzero")
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "offset", offset)

    @classmethod
    def identity(cls, n: int) -> "AffineScaler":
        return cls(np.ones(n), np.zeros(n))

    @classmethod
    def from_range(cls, lo, hi) -> "AffineScaler":
        """Scaler sending ``lo`` to -1 and ``hi`` to +1, per channel."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        span = hi - lo
        if np.any(span <= 0):
            raise ValueError("constant channel: cannot normalise")
        gain = 2.0 / span
        return cls(gain, -1.0 - gain * lo)

    def normalize(self, physical):
        return np.asarray(physical, dtype=np.float64) * self.gain + self.offset

    def denormalize(self, normalized):
        return (np.asarray(normalized, dtype=np.float64) - self.offset) / self.gain

    def to_dict(self) -> dict:
        return {"gain": self.gain.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineScaler":
        return cls(d["gain"], d["offset"])


@dataclass(frozen=True, eq=False)
class DeepGruModel:
    layers: tuple
    U_o: np.ndarray
    b_o: np.ndarray
    input_scaler: AffineScaler | None = None
    output_scaler: AffineScaler | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("a model needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].n_u != layers[i - 1].n_x:
                raise ValueError(
                    f"layer {i + 1} input width {layers[i].n_u} != layer {i} state width {layers[i - 1].n_x}")
        U_o = as_matrix(self.U_o, "U_o")
        b_o = as_vector(self.b_o, "b_o")
        if U_o.shape != (b_o.shape[0], layers[-1].n_x):
            raise ValueError(f"U_o must be {(b_o.shape[0], layers[-1].n_x)}")
        U_o.setflags(write=False)
        b_o.setflags(write=False)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "U_o", U_o)
        object.__setattr__(self, "b_o", b_o)
        if self.input_scaler is None:
            object.__setattr__(self, "input_scaler", AffineScaler.identity(layers[0].n_u))
        if self.output_scaler is None:
            object.__setattr__(self, "output_scaler", AffineScaler.identity(b_o.shape[0]))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def n_u(self) -> int:
        return self.layers[0].n_u

    @property
    def n_o(self) -> int:
        return self.b_o.shape[0]

    @property
    def widths(self) -> list[int]:
        return [p.n_x for p in self.layers]

    @classmethod
    def zeros(cls, n_u: int, widths: Sequence[int], n_o: int) -> "DeepGruModel":
        layers, prev = [], n_u
        for n in widths:
            layers.append(GruLayerParams.zeros(n, prev))
            prev = n
        return cls(tuple(layers), np.zeros((n_o, prev)), np.zeros(n_o))

    @classmethod
    def random(cls, n_u: int, widths: Sequence[int], n_o: int, rng: np.random.Generator,
               scale: float = 1.0) -> "DeepGruModel":
        layers, prev = [], n_u
        for n in widths:
            layers.append(GruLayerParams.random(n, prev, rng, scale))
            prev = n
        return cls(tuple(layers), rng.uniform(-scale, scale, (n_o, prev)), rng.uniform(-scale, scale, n_o))

    def replace(self, **changes) -> "DeepGruModel":
        kw = dict(layers=self.layers, U_o=self.U_o, b_o=self.b_o,
                  input_scaler=self.input_scaler, output_scaler=self.output_scaler)
        kw.update(changes)
        return DeepGruModel(**kw)


class Gates(NamedTuple):
    z: np.ndarray
    f: np.ndarray
    r: np.ndarray


def _gates(p: GruLayerParams, x: np.ndarray, u: np.ndarray) -> Gates:
    z = sigmoid(u @ p.W_z.T + x @ p.U_z.T + p.b_z)
    f = sigmoid(u @ p.W_f.T + x @ p.U_f.T + p.b_f)
    r = tanh_act(u @ p.W_r.T + (f * x) @ p.U_r.T + p.b_r)
    return Gates(np.asarray(z), np.asarray(f), np.asarray(r))


def _check_shapes(p: GruLayerParams, x: np.ndarray, u: np.ndarray):
    if x.shape[-1] != p.n_x:
        raise ValueError(f"state width {x.shape[-1]} != layer width {p.n_x}")
    if u.shape[-1] != p.n_u:
        raise ValueError(f"input width {u.shape[-1]} != layer input width {p.n_u}")


def layer_step(p: GruLayerParams, x, u) -> tuple[np.ndarray, Gates]:
    """Advance one layer by one step; returns ``(x_next, gates)``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_shapes(p, x, u)
    g = _gates(p, x, u)
    return g.z * x + (1.0 - g.z) * g.r, g


def lpv_coefficients(p: GruLayerParams, x, u) -> tuple[np.ndarray, np.ndarray]:
    """Per-component ``(omega, eta)`` with ``x+_j = omega_j x_j + (1 - omega_j) eta_j``."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_shapes(p, x, u)
    g = _gates(p, x, u)
    return g.z, g.r


def check_unity_bounded(u, tol: float = UNITY_TOL):
    u = np.asarray(u, dtype=np.float64)
    if u.size and np.max(np.abs(u)) > 1.0 + tol:
        raise ValueError(f"input is not unity-bounded: max |u| = {np.max(np.abs(u))!r}")


def zero_state(m: DeepGruModel, batch: int | None = None) -> GruState:
    shape = () if batch is None else (batch,)
    return tuple(np.zeros(shape + (n,)) for n in m.widths)


def deep_step(m: DeepGruModel, s: GruState, u) -> GruState:
    check_unity_bounded(u)
    if len(s) != m.depth:
        raise ValueError(f"state has {len(s)} layers, model has {m.depth}")
    out = []
    inp = np.asarray(u, dtype=np.float64)
    for p, x in zip(m.layers, s):
        inp, _ = layer_step(p, x, inp)
        out.append(inp)
    return tuple(out)


def output(m: DeepGruModel, s: GruState) -> np.ndarray:
    return np.asarray(s[-1]) @ m.U_o.T + m.b_o


@dataclass
class Trajectory:
    """Per-layer state arrays shaped ``(T, ..., n_x^i)`` and outputs ``(T, ..., n_o)``.

    ``states[i][k]`` is the layer-``i`` state at step ``k``, which depends on
    ``inputs[0..k-1]`` only.
    """

    states: list = field(default_factory=list)
    outputs: np.ndarray | None = None

    def __len__(self):
        return 0 if self.outputs is None else self.outputs.shape[0]

    def state(self, k: int) -> GruState:
        return tuple(x[k] for x in self.states)


def simulate_layer(p: GruLayerParams, x0, inputs) -> np.ndarray:
    """States ``x(0..T)`` of a single layer driven by ``inputs`` (length ``T``)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    x = np.asarray(x0, dtype=np.float64)
    T = inputs.shape[0]
    xs = np.empty((T + 1,) + x.shape)
    xs[0] = x
    if T == 0:
        return xs
    _check_shapes(p, x, inputs[0])
    # input contributions for all steps in one product
    Wz_u = inputs @ p.W_z.T + p.b_z
    Wf_u = inputs @ p.W_f.T + p.b_f
    Wr_u = inputs @ p.W_r.T + p.b_r
    UzT, UfT, UrT = p.U_z.T, p.U_f.T, p.U_r.T
    for k in range(T):
        z = sigmoid(Wz_u[k] + x @ UzT)
        f = sigmoid(Wf_u[k] + x @ UfT)
        r = np.tanh(Wr_u[k] + (f * x) @ UrT)
        x = z * x + (1.0 - z) * r
        xs[k + 1] = x
    return xs


def simulate(m: DeepGruModel, x0: GruState | None, inputs) -> Trajectory:
    """Open-loop run over ``inputs`` (shape ``(T, ..., n_u)``, normalised units).

    Returns a trajectory of length ``T``: states and outputs at steps ``0..T-1``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    T = inputs.shape[0]
    if T == 0:
        return Trajectory([np.empty((0, n)) for n in m.widths], np.empty((0, m.n_o)))
    check_unity_bounded(inputs)
    if inputs.shape[-1] != m.n_u:
        raise ValueError(f"input width {inputs.shape[-1]} != model input width {m.n_u}")
    if x0 is None:
        x0 = zero_state(m, None if inputs.ndim == 2 else inputs.shape[1])
    if len(x0) != m.depth:
        raise ValueError(f"initial state has {len(x0)} layers, model has {m.depth}")
    states = []
    layer_in = inputs
    for p, xi in zip(m.layers, x0):
        xs = simulate_layer(p, xi, layer_in)
        states.append(xs[:T])
        layer_in = xs[1:]
    outputs = states[-1] @ m.U_o.T + m.b_o
    return Trajectory(states, outputs)


# -- serialization ---------------------------------------------------------

def model_to_dict(m: DeepGruModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "layers": [{name: getattr(p, name).tolist() for name in PARAM_NAMES} for p in m.layers],
        "U_o": m.U_o.tolist(),
        "b_o": m.b_o.tolist(),
        "input_scaler": m.input_scaler.to_dict(),
        "output_scaler": m.output_scaler.to_dict(),
    }


def _matrix_from_rows(rows, n_cols: int) -> np.ndarray:
    if len(rows) == 0:
        return np.zeros((0, n_cols))
    return np.array(rows, dtype=np.float64)


def model_from_dict(d: dict) -> DeepGruModel:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {d.get('format_version')!r}")
    layers = []
    for ld in d["layers"]:
        n_x = len(ld["b_z"])
        n_u = len(ld["W_z"][0]) if ld["W_z"] else 0
        arrays = {}
        for name in PARAM_NAMES:
            if name[0] == "b":
                arrays[name] = np.array(ld[name], dtype=np.float64)
            else:
                arrays[name] = _matrix_from_rows(ld[name], n_u if name[0] == "W" else n_x)
        layers.append(GruLayerParams(**arrays))
    return DeepGruModel(
        tuple(layers), np.array(d["U_o"], dtype=np.float64), np.array(d["b_o"], dtype=np.float64),
        AffineScaler.from_dict(d["input_scaler"]), AffineScaler.from_dict(d["output_scaler"]))


def dumps_model(m: DeepGruModel) -> str:
    # json writes floats with repr(), the shortest string that round-trips
    return json.dumps(model_to_dict(m), indent=1) + "\n"


def loads_model(text: str) -> DeepGruModel:
    return model_from_dict(json.loads(text))


def save_model(m: DeepGruModel, path) -> None:
    from .io import atomic_write_text
    atomic_write_text(Path(path), dumps_model(m))


def load_model(path) -> DeepGruModel:
    return loads_model(Path(path).read_text())
