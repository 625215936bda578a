"""Proxy-quality evaluation of patterns on the toy model."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .metrics import flops_estimate, relative_l1
from .pattern import CachingPattern
from .schedule import ExecutionPlan, SelectiveConfig, build_plan, pure_caching_plan
from .tinydit import ModelConfig, ModelWeights, RunResult, TinyDiT, init_model, make_inputs


class Simulator:
    """Runs patterns against a full-compute baseline on seeded inputs.

    ``selective=None`` means pure caching. Baseline runs are memoised per
    input, so scoring many candidates costs one cached run each.
    """

    def __init__(self, config: ModelConfig, selective: SelectiveConfig | None = None,
                 weights: ModelWeights | None = None):
        self.config = config
        self.selective = selective
        self.model = TinyDiT(config, weights if weights is not None else init_model(config))
        self._baseline = lru_cache(maxsize=None)(self._run_baseline)

    def with_selective(self, selective: SelectiveConfig | None) -> "Simulator":
        sim = Simulator.__new__(Simulator)
        sim.config, sim.selective, sim.model = self.config, selective, self.model
        sim._baseline = self._baseline
        return sim

    def inputs(self, seed: int, index: int = 0):
        return make_inputs(self.config, seed, index)

    def _run_baseline(self, seed: int, index: int, capture: bool = False) -> RunResult:
        x0, ctx = self.inputs(seed, index)
        return self.model.run(None, x0, ctx, capture=capture)

    def baseline(self, seed: int, index: int = 0, capture: bool = False) -> RunResult:
        return self._baseline(seed, index, capture)

    def plan(self, pattern: CachingPattern) -> ExecutionPlan:
        if self.selective is None:
            return pure_caching_plan(pattern, self.config.layers)
        return build_plan(pattern, self.selective)

    def run(self, pattern: CachingPattern, seed: int, index: int = 0, capture: bool = False) -> RunResult:
        x0, ctx = self.inputs(seed, index)
        p = self.selective.token_ratio if self.selective is not None else 1.0
        return self.model.run(self.plan(pattern), x0, ctx, token_ratio=p, capture=capture)

    def scores(self, pattern: CachingPattern, seeds, batch: int = 1) -> list[float]:
        return [
            relative_l1(self.run(pattern, s, i).final, self.baseline(s, i).final)
            for s in seeds
            for i in range(batch)
        ]

    def flops_ratio(self, pattern: CachingPattern) -> float:
        return flops_estimate(self.plan(pattern), self.config, self.selective).ratio

    def evaluate(self, pattern: CachingPattern, seeds, batch: int = 1) -> tuple[float, float]:
        """``(mean relative L1 of the final output, flops ratio)``."""
        return float(np.mean(self.scores(pattern, seeds, batch))), self.flops_ratio(pattern)
