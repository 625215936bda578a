"""Per-step, per-layer execution plans.

A cached step ``t`` inside a run of zeros gets selective computation when its
1-based offset from the start of that run is even; those steps recompute the
deepest layers only. Layers are 1-based with layer ``L`` the deepest.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

from .errors import ConfigError
from .pattern import CachingPattern, _bits_of


class StepAction(enum.Enum):
    FULL = "FullCompute"
    SELECTIVE = "SelectiveCompute"
    CACHE = "CacheOnly"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SelectiveConfig:
    layer_ratio: float
    token_ratio: float
    total_layers: int

    def __post_init__(self):
        if not 0 < self.layer_ratio <= 1:
            raise ConfigError(f"layer_ratio must lie in (0, 1], got {self.layer_ratio}")
        if not 0 < self.token_ratio <= 1:
            raise ConfigError(f"token_ratio must lie in (0, 1], got {self.token_ratio}")
        if self.total_layers < 1:
            raise ConfigError("total_layers must be >= 1")

    @property
    def depth(self) -> int:
        # round half up, never below one layer
        d = Decimal(repr(self.layer_ratio)) * self.total_layers
        return max(1, int(d.quantize(Decimal(1), rounding=ROUND_HALF_UP)))


@dataclass(frozen=True)
class ExecutionPlan:
    steps: int
    layers: int
    actions: tuple[tuple[StepAction, ...], ...]
    selective_steps: frozenset[int]
    selective_layers: frozenset[int]

    def action(self, t: int, layer: int) -> StepAction:
        """Action at 1-based step ``t`` and layer ``layer``."""
        return self.actions[t - 1][layer - 1]

    def count(self, kind: StepAction) -> int:
        return sum(row.count(kind) for row in self.actions)

    @classmethod
    def uniform(cls, steps: int, layers: int, kind: StepAction = StepAction.FULL) -> "ExecutionPlan":
        return cls(steps, layers, ((kind,) * layers,) * steps, frozenset(), frozenset())

    def summary(self) -> dict:
        full_steps = sum(1 for row in self.actions if row[0] is StepAction.FULL)
        return {
            "steps": self.steps,
            "layers": self.layers,
            "full_steps": full_steps,
            "selective_steps": sorted(self.selective_steps),
            "selective_layers": sorted(self.selective_layers),
            "full_cells": self.count(StepAction.FULL),
            "selective_cells": self.count(StepAction.SELECTIVE),
            "cache_cells": self.count(StepAction.CACHE),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "layer", "action"])
        for t, row in enumerate(self.actions, start=1):
            for layer, a in enumerate(row, start=1):
                w.writerow([t, layer, a.value])
        return buf.getvalue()

    def dump(self, csv_path, summary_path) -> None:
        with open(csv_path, "w", newline="") as f:
            f.write(self.to_csv())
        with open(summary_path, "w") as f:
            json.dump(self.summary(), f, indent=2)
            f.write("\n")


def zero_block_start(pattern, t: int) -> int:
    """First step of the zero run containing ``t``; ``t`` itself when ``s_t = 1``.

    Returns 1 when no activation precedes ``t``.
    """
    bits = _bits_of(pattern)
    if not 1 <= t <= len(bits):
        raise ValueError(f"step {t} outside 1..{len(bits)}")
    if bits[t - 1]:
        return t
    for tau in range(t, 0, -1):
        if bits[tau - 1]:
            return tau + 1
    return 1


def selective_steps(pattern) -> frozenset[int]:
    bits = _bits_of(pattern)
    out = set()
    run = 0
    for t, b in enumerate(bits, start=1):
        run = 0 if b else run + 1
        if run and run % 2 == 0:
            out.add(t)
    return frozenset(out)


def selective_layers(cfg: SelectiveConfig) -> frozenset[int]:
    L = cfg.total_layers
    return frozenset(range(L - cfg.depth + 1, L + 1))


def build_plan(pattern: CachingPattern, cfg: SelectiveConfig) -> ExecutionPlan:
    bits = _bits_of(pattern)
    return _plan(bits, cfg.total_layers, selective_steps(bits), selective_layers(cfg))


def pure_caching_plan(pattern: CachingPattern, layers: int) -> ExecutionPlan:
    """Plan with no selective computation: every cached step replays the cache."""
    return _plan(_bits_of(pattern), layers, frozenset(), frozenset())


def _plan(bits, L, t_sel, u_sel) -> ExecutionPlan:
    rows = []
    for t, b in enumerate(bits, start=1):
        if b:
            rows.append((StepAction.FULL,) * L)
        elif t in t_sel:
            rows.append(
                tuple(StepAction.SELECTIVE if layer in u_sel else StepAction.CACHE for layer in range(1, L + 1))
            )
        else:
            rows.append((StepAction.CACHE,) * L)
    return ExecutionPlan(len(bits), L, tuple(rows), frozenset(t_sel), frozenset(u_sel))
