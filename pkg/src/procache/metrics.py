"""Error curves and the analytic cost model.

Relative L1 is ``sum|a - b| / sum|b|`` with ``b`` the full-compute baseline.

Flop accounting (one multiply-accumulate = 2 flops, N tokens, d width,
h heads, C context tokens, H = mlp hidden width, n = selected tokens)::

    modulation (per computed sub-module)   2*d*3d + 3d
    SA, all tokens                         mod + 5Nd + 4*2Nd^2 + 2*2N^2 d + 5hN^2 + Nd + Nd
    CA on n query rows                     mod + 5nd + 2*2nd^2 + 2*2Cd^2 + 2*2nCd + 5hnC + nd + Nd
    MLP on n rows                          mod + 5nd + 2*2ndH + 5nH + nd + Nd
    token importance                       2Nd
    cache replay (per sub-module)          Nd
    input rescale + head + update (step)   3Nd + 5Nd + 2Nd^2 + 3Nd

A selective cell is SA over N tokens plus importance plus CA/MLP with n rows.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError
from .schedule import ExecutionPlan, SelectiveConfig, StepAction
from .tinydit import (
    FLOPS_ADD,
    FLOPS_GATE,
    FLOPS_GELU,
    FLOPS_INPUT_SCALE,
    FLOPS_NORM,
    FLOPS_PER_MAC as MAC,
    FLOPS_SOFTMAX,
    FLOPS_UPDATE,
    ModelConfig,
)

CURVE_COLUMNS = ("axis", "label", "value")


def relative_l1(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = np.abs(b).sum()
    if denom == 0:
        raise UndefinedMetricError("relative L1 is undefined for an all-zero baseline")
    return float(np.abs(a - b).sum() / denom)


@dataclass
class ErrorCurve:
    axis: list[int]
    values: list[float]
    label: str

    def __post_init__(self):
        if len(self.axis) != len(self.values):
            raise ValueError("axis and values differ in length")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError(f"non-finite value in curve {self.label!r}")

    def rows(self):
        return [(a, self.label, v) for a, v in zip(self.axis, self.values)]


def curves_to_csv(curves) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for c in curves:
        for a, label, v in c.rows():
            w.writerow([a, label, repr(float(v))])
    return buf.getvalue()


def consecutive_output_delta(outputs, label: str = "output_delta") -> ErrorCurve:
    """L1 norm of ``output_t - output_{t-1}`` for t = 2..T."""
    if outputs is None or len(outputs) < 2:
        raise ValueError("need at least two step snapshots")
    vals = [float(np.abs(outputs[i] - outputs[i - 1]).sum()) for i in range(1, len(outputs))]
    return ErrorCurve(list(range(2, len(outputs) + 1)), vals, label)


def _feature(features, t, layer):
    try:
        if features is None or t < 1 or layer < 1:
            raise IndexError
        return features[t - 1][layer - 1]
    except IndexError:
        raise ValueError(f"missing feature snapshot at step {t}, layer {layer}") from None


def block_error_profile(cached, baseline, t: int, label: str | None = None) -> ErrorCurve:
    """Relative L1 of every block's output at step ``t``."""
    n_layers = len(_require(baseline, t))
    vals = [relative_l1(_feature(cached, t, l), _feature(baseline, t, l)) for l in range(1, n_layers + 1)]
    return ErrorCurve(list(range(1, n_layers + 1)), vals, label or f"step={t}")


def _require(features, t):
    if features is None or not 1 <= t <= len(features):
        raise ValueError(f"missing feature snapshot at step {t}, layer 1")
    return features[t - 1]


def layer_error_curves(cached, baseline) -> list[ErrorCurve]:
    """Per-layer relative L1 over steps, one curve per layer."""
    steps = len(baseline)
    layers = len(baseline[0])
    return [
        ErrorCurve(
            list(range(1, steps + 1)),
            [relative_l1(cached[t][l - 1], baseline[t][l - 1]) for t in range(steps)],
            f"layer={l}",
        )
        for l in range(1, layers + 1)
    ]


def step_error_curve(cached, baseline, label: str = "mean_over_layers") -> ErrorCurve:
    """Mean over layers of the per-block relative L1, for every step."""
    per_layer = layer_error_curves(cached, baseline)
    vals = np.mean([c.values for c in per_layer], axis=0)
    return ErrorCurve(list(range(1, len(baseline) + 1)), [float(v) for v in vals], label)


# -- cost model ---------------------------------------------------------------


def _modulation(d):
    return MAC * d * 3 * d + 3 * d


def _sa_cost(c: ModelConfig):
    N, d, h = c.tokens, c.dim, c.heads
    return (
        _modulation(d)
        + FLOPS_NORM * N * d
        + 4 * MAC * N * d * d
        + 2 * MAC * N * N * d
        + FLOPS_SOFTMAX * h * N * N
        + FLOPS_GATE * N * d
        + FLOPS_ADD * N * d
    )


def _gate_rows(c: ModelConfig, n):
    # remodulated replay gates every row, fresh or not
    return c.tokens if c.remodulate else n


def _ca_cost(c: ModelConfig, n):
    N, d, h, C = c.tokens, c.dim, c.heads, c.context_tokens
    return (
        _modulation(d)
        + FLOPS_NORM * n * d
        + 2 * MAC * n * d * d
        + 2 * MAC * C * d * d
        + 2 * MAC * n * C * d
        + FLOPS_SOFTMAX * h * n * C
        + FLOPS_GATE * _gate_rows(c, n) * d
        + FLOPS_ADD * N * d
    )


def _mlp_cost(c: ModelConfig, n):
    N, d, H = c.tokens, c.dim, c.hidden
    return (
        _modulation(d)
        + FLOPS_NORM * n * d
        + 2 * MAC * n * d * H
        + FLOPS_GELU * n * H
        + FLOPS_GATE * _gate_rows(c, n) * d
        + FLOPS_ADD * N * d
    )


def _replay_cost(c: ModelConfig):
    N, d = c.tokens, c.dim
    extra = (MAC * d * d + d + FLOPS_GATE * N * d) if c.remodulate else 0
    return FLOPS_ADD * N * d + extra


def selected_count(tokens: int, p: float) -> int:
    return max(1, math.floor(p * tokens + 1e-9))


def cell_costs(config: ModelConfig, token_ratio: float) -> dict[str, int]:
    """Flops of one (step, layer) cell per action, excluding per-layer importance
    when token sets are shared per step (see ``importance``)."""
    c = config
    N, d = c.tokens, c.dim
    n = selected_count(N, token_ratio)
    full = _sa_cost(c) + _ca_cost(c, N) + _mlp_cost(c, N)
    if c.sa_mode == "recompute":
        sa_sel = _sa_cost(c)
    else:
        sa_sel = _modulation(d) + FLOPS_NORM * N * d + MAC * N * d * d + _replay_cost(c)
    selective = sa_sel + _ca_cost(c, n) + _mlp_cost(c, n)
    return {
        StepAction.FULL.value: full,
        StepAction.SELECTIVE.value: selective,
        StepAction.CACHE.value: 3 * _replay_cost(c),
        "importance": MAC * N * d,
        "per_step": (FLOPS_INPUT_SCALE + FLOPS_NORM + FLOPS_UPDATE) * N * d + MAC * N * d * d,
    }


@dataclass
class FlopsReport:
    per_action: dict[str, int]
    cells: dict[str, int]
    total: int
    baseline: int
    # flops added by selective cells over replaying the cache in those cells
    selective_flops: int = 0

    @property
    def ratio(self) -> float:
        return self.total / self.baseline

    @property
    def speedup(self) -> float:
        return self.baseline / self.total

    @property
    def selective_overhead(self) -> float:
        """Share of the run's flops added by selective computation."""
        return self.selective_flops / self.total

    def to_json(self) -> dict:
        return {
            "per_action": dict(self.per_action),
            "cells": dict(self.cells),
            "total": self.total,
            "baseline": self.baseline,
            "ratio": self.ratio,
            "speedup": self.speedup,
            "selective_flops": self.selective_flops,
            "selective_overhead": self.selective_overhead,
        }


def flops_estimate(plan: ExecutionPlan, config: ModelConfig, cfg: SelectiveConfig | None = None) -> FlopsReport:
    p = cfg.token_ratio if cfg is not None else 1.0
    costs = cell_costs(config, p)
    cells = {a.value: plan.count(a) for a in StepAction}
    total = plan.steps * costs["per_step"]
    selective = 0
    for row in plan.actions:
        n_sel = row.count(StepAction.SELECTIVE)
        if n_sel:
            imp = costs["importance"] * (1 if config.token_scope == "step" else n_sel)
            selective += n_sel * costs[StepAction.SELECTIVE.value] + imp
    total += selective
    extra = selective - cells[StepAction.SELECTIVE.value] * costs[StepAction.CACHE.value]
    total += cells[StepAction.FULL.value] * costs[StepAction.FULL.value]
    total += cells[StepAction.CACHE.value] * costs[StepAction.CACHE.value]
    baseline = plan.steps * (costs["per_step"] + plan.layers * costs[StepAction.FULL.value])
    per_action = {a.value: costs[a.value] for a in StepAction}
    return FlopsReport(per_action, cells, int(total), int(baseline), int(extra))


@dataclass
class EvalReport:
    proxy_score: float
    flops: FlopsReport
    pattern: list[int]
    selective: dict | None
    seeds: list[int]
    curves: dict = field(default_factory=dict)
    per_seed: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "proxy_score": self.proxy_score,
            "per_seed": list(self.per_seed),
            "flops": self.flops.to_json(),
            "pattern": list(self.pattern),
            "selective": self.selective,
            "seeds": list(self.seeds),
            "curves": dict(self.curves),
        }
