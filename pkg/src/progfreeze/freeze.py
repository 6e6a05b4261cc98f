"""Declarative freeze plans: linear probing, progressive unfreezing, full fine-tuning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .nnet import BACKBONE_GROUPS, Network

PROG_ORDER = ("layer4", "layer3", "layer2")


class Mode(str, Enum):
    PROG_FREEZE = "ProgFreeze"
    FULL_IFT = "FullIFT"


@dataclass(frozen=True)
class FreezePlan:
    mode: Mode
    probe_epochs: int
    total_epochs: int
    events: tuple[tuple[int, str], ...] = field(default=())

    def __post_init__(self):
        epochs = [e for e, _ in self.events]
        if epochs != sorted(epochs):
            raise ValueError("events must be sorted by epoch")

    def trainable_at(self, epoch: int) -> frozenset[str]:
        return frozenset({"head"} | {g for e, g in self.events if e <= epoch})

    def unfreeze_epochs(self) -> dict[str, int]:
        return {g: e for e, g in self.events}

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "probe_epochs": self.probe_epochs,
            "total_epochs": self.total_epochs,
            "events": [[e, g] for e, g in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FreezePlan":
        return cls(Mode(d["mode"]), int(d["probe_epochs"]), int(d["total_epochs"]),
                   tuple((int(e), str(g)) for e, g in d["events"]))


def make_plan(mode: Mode | str, probe_epochs: int, total_epochs: int,
              events: list[tuple[int, str]] | None = None) -> FreezePlan:
    """Build the per-epoch unfreeze schedule.

    ProgFreeze unfreezes layer4, layer3, layer2 at probe + ceil(i * (total - probe) / 4)
    for i = 0, 1, 2; stem and layer1 stay frozen.
    FullIFT unfreezes the whole backbone at the end of probing. Explicit
    ``events`` override the default spacing.
    """
    mode = Mode(mode)
    if total_epochs < 1:
        raise ValueError("total_epochs must be positive")
    if not 0 <= probe_epochs < total_epochs:
        raise ValueError(
            f"probe_epochs ({probe_epochs}) must be in [0, total_epochs={total_epochs})")
    if events is not None:
        evs = tuple(sorted((int(e), str(g)) for e, g in events))
        for e, g in evs:
            if g not in BACKBONE_GROUPS:
                raise ValueError(f"unknown group {g!r} in events")
            if e < probe_epochs:
                raise ValueError("unfreeze event inside the probe phase")
        return FreezePlan(mode, probe_epochs, total_epochs, evs)
    if mode is Mode.FULL_IFT:
        evs = tuple((probe_epochs, g) for g in reversed(BACKBONE_GROUPS))
    else:
        budget = total_epochs - probe_epochs
        evs = tuple((probe_epochs + math.ceil(i * budget / 4), g) for i, g in enumerate(PROG_ORDER))
    return FreezePlan(mode, probe_epochs, total_epochs, evs)


def apply(plan: FreezePlan, epoch: int, net: Network) -> frozenset[str]:
    """Set the network's trainable flags for ``epoch``; returns the trainable set."""
    if not 0 <= epoch < plan.total_epochs:
        raise ValueError(f"epoch {epoch} outside plan of {plan.total_epochs} epochs")
    trainable = plan.trainable_at(epoch)
    net.set_trainable(trainable)
    return trainable


def in_probe(plan: FreezePlan, epoch: int) -> bool:
    return epoch < plan.probe_epochs
