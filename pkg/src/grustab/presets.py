"""Named experiment settings shared by the CLI, demos and acceptance tests.

``paper`` is the full quadruple-tank protocol with a 3 x 7 network; ``desk``
is a scaled-down run that finishes in minutes on one core.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .plant import Protocol
from .training import TrainConfig
from .verify import VerificationPlan


@dataclass(frozen=True)
class Preset:
    name: str
    protocol: Protocol
    widths: tuple
    train: TrainConfig
    verify: VerificationPlan = field(default_factory=VerificationPlan)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "protocol": self.protocol.to_dict(),
            "widths": list(self.widths),
            "train": self.train.to_dict(),
            "verify": {**self.verify.__dict__, "radius": list(self.verify.radius)},
        }


PAPER = Preset(
    name="paper",
    protocol=Protocol(),
    widths=(7, 7, 7),
    train=TrainConfig(),
)

DESK = Preset(
    name="desk",
    protocol=Protocol(n_experiments=6, length=300, splits=(4, 1, 1)),
    widths=(5, 5),
    # small initial weights start every residual below the clearance; from
    # there the validation error needs well over 20 epochs to start falling
    train=TrainConfig(init_scale=0.1, patience=200),
)

PRESETS = {p.name: p for p in (PAPER, DESK)}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def apply_overrides(preset: Preset, overrides: dict) -> Preset:
    """Merge a config mapping with sections ``protocol``, ``model``, ``train``, ``verify``."""
    unknown = set(overrides) - {"protocol", "model", "train", "verify"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    p = preset
    if "protocol" in overrides:
        p = replace(p, protocol=Protocol.from_dict({**p.protocol.to_dict(), **overrides["protocol"]}))
    if "model" in overrides:
        model = dict(overrides["model"])
        widths = model.pop("widths", p.widths)
        if model:
            raise ValueError(f"unknown model keys: {sorted(model)}")
        if not widths or any(int(w) < 1 for w in widths):
            raise ValueError("widths must be a non-empty list of positive integers")
        p = replace(p, widths=tuple(int(w) for w in widths))
    if "train" in overrides:
        p = replace(p, train=TrainConfig.from_dict({**p.train.to_dict(), **overrides["train"]}))
    if "verify" in overrides:
        v = {**p.verify.__dict__, **overrides["verify"]}
        v["radius"] = tuple(v["radius"])
        try:
            p = replace(p, verify=VerificationPlan(**v))
        except TypeError as exc:
            raise ValueError(f"bad verify section: {exc}") from None
    return p
