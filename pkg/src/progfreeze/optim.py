"""AdamW with per-group learning-rate multipliers and a OneCycle schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nnet import GROUP_NAMES, Network


def discriminative_multipliers(decay: float = 0.3) -> dict[str, float]:
    """Geometric decay from the head (1.0) toward the stem."""
    order = list(reversed(GROUP_NAMES))  # head, layer4, ..., stem
    return {name: decay ** i for i, name in enumerate(order)}


def check_multipliers(mult: dict[str, float]) -> None:
    if mult.get("head", 1.0) != 1.0:
        raise ValueError("head multiplier must be 1.0")
    prev = math.inf
    for name in reversed(GROUP_NAMES):
        m = mult.get(name, 0.0)
        if m < 0:
            raise ValueError(f"negative multiplier for {name}")
        if m > prev:
            raise ValueError("multipliers must not increase from head toward stem")
        prev = m


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    # per-group step counters; a group gets fresh moments (and t=0) on first update
    t: dict[str, int] = field(default_factory=dict)
    m: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    v: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def reset_group(self, name: str) -> None:
        self.t.pop(name, None)
        self.m.pop(name, None)
        self.v.pop(name, None)

    def copy(self) -> "AdamWState":
        return AdamWState(
            self.beta1, self.beta2, self.eps, self.weight_decay, dict(self.t),
            {g: {k: a.copy() for k, a in d.items()} for g, d in self.m.items()},
            {g: {k: a.copy() for k, a in d.items()} for g, d in self.v.items()},
        )


def adamw_step(state: AdamWState, net: Network, grads: dict, base_lr: float,
               mult: dict[str, float] | None = None) -> None:
    """One in-place AdamW update of every trainable group.

    Weight decay is decoupled and skipped for bias vectors (names ending in ``b``).
    """
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    mult = mult or {}
    trainable = net.trainable_groups()
    if set(grads) != set(trainable):
        raise RuntimeError(
            f"gradient groups {sorted(grads)} do not match trainable groups {sorted(trainable)}")
    b1, b2 = state.beta1, state.beta2
    for gname in trainable:
        params = net.group(gname).params
        g_grads = grads[gname]
        if gname not in state.t:
            state.t[gname] = 0
            state.m[gname] = {k: np.zeros_like(p) for k, p in params.items()}
            state.v[gname] = {k: np.zeros_like(p) for k, p in params.items()}
        state.t[gname] += 1
        t = state.t[gname]
        lr = base_lr * mult.get(gname, 1.0)
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for k, p in params.items():
            g = g_grads[k]
            if g.shape != p.shape:
                raise RuntimeError(f"gradient shape {g.shape} != param shape {p.shape} for {gname}.{k}")
            m = state.m[gname][k]
            v = state.v[gname][k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr == 0.0:
                continue
            if state.weight_decay and not k.endswith("b"):
                p *= 1.0 - lr * state.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    max_lr: float = 1e-3
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 <= self.pct_start <= 1.0:
            raise ValueError("pct_start must be in [0, 1]")

    @property
    def peak_step(self) -> int:
        return min(int(round(self.pct_start * self.total_steps)), self.total_steps - 1)

    def lr(self, step: int) -> float:
        return onecycle_lr(self, step)


def _cos_interp(start: float, end: float, frac: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


def onecycle_lr(s: OneCycleSchedule, step: int) -> float:
    """Cosine warm-up to ``max_lr`` then cosine anneal to ``max_lr / final_div_factor``.

    The last step (``total_steps - 1``) lands exactly on the final value.
    """
    if not 0 <= step < s.total_steps:
        raise ValueError(f"step {step} outside [0, {s.total_steps})")
    initial = s.max_lr / s.div_factor
    final = s.max_lr / s.final_div_factor
    peak = s.peak_step
    if step < peak:
        return _cos_interp(initial, s.max_lr, step / peak)
    tail = s.total_steps - 1 - peak
    if tail <= 0:
        return s.max_lr
    return _cos_interp(s.max_lr, final, (step - peak) / tail)
