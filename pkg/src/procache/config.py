"""Experiment configuration files and named presets.

A config is JSON with ``"schema": 1``::

    {
      "schema": 1,
      "preset": "pixart-like",          # optional, applied first
      "model": {...ModelConfig fields...},
      "constraints": {"budget": 7, "v_min": 2, "v_max": 3, "require_monotonic": false},
      "search": {"quota": 5, "max_attempts": 1000000, "seed": 0,
                 "eval_seeds": [0, 1, 2], "eval_batch": 1, "proposal": "bits"},
      "selective": {"layer_ratio": 0.5, "token_ratio": 0.3},
      "output_dir": "out",
      "capture_snapshots": false
    }

``constraints.steps`` and ``selective.total_layers`` are taken from the model.

Presets carry the search and selective-computation settings used for a
DiT-XL/2-class and a PixArt-class model, mapped onto the toy engine:

* ``dit-xl2-like``: B=17, v in [2, 5], p=7%, r=75%, K=5, 50 steps. The toy model
  keeps 8 layers (not 28) and uses 64 tokens so that p=7% selects 4 tokens.
  Sampling uses the interval-walk proposal; at T=50 the per-bit proposal
  almost never lands in the feasible set.
* ``pixart-like``: B=7, v in [2, 3], p=30%, r=50%, K=5, 20 steps on the
  reference model (8 layers, width 64, 4 heads, 16 tokens, seed 42).
* ``golden``: a frozen copy of ``pixart-like`` used by the regression fixtures.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import ConfigError
from .pattern import ConstraintSet, SearchConfig
from .schedule import SelectiveConfig
from .tinydit import ModelConfig

SCHEMA_VERSION = 1

PRESETS: dict[str, dict] = {
    "dit-xl2-like": {
        "model": {"layers": 8, "dim": 64, "heads": 4, "tokens": 64, "context_tokens": 8,
                  "steps": 50, "seed": 42},
        "constraints": {"budget": 17, "v_min": 2, "v_max": 5, "require_monotonic": False},
        "search": {"quota": 5, "max_attempts": 10**6, "seed": 0, "eval_seeds": [0, 1],
                   "eval_batch": 1, "proposal": "intervals"},
        "selective": {"layer_ratio": 0.75, "token_ratio": 0.07},
    },
    "pixart-like": {
        "model": {"layers": 8, "dim": 64, "heads": 4, "tokens": 16, "context_tokens": 8,
                  "steps": 20, "seed": 42},
        "constraints": {"budget": 7, "v_min": 2, "v_max": 3, "require_monotonic": False},
        "search": {"quota": 5, "max_attempts": 10**6, "seed": 0, "eval_seeds": [0, 1, 2],
                   "eval_batch": 1, "proposal": "bits"},
        "selective": {"layer_ratio": 0.5, "token_ratio": 0.3},
    },
}
PRESETS["golden"] = copy.deepcopy(PRESETS["pixart-like"])


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    constraints: ConstraintSet
    search: SearchConfig
    selective: SelectiveConfig
    output_dir: str = "out"
    capture_snapshots: bool = False

    def __post_init__(self):
        if self.constraints.steps != self.model.steps:
            raise ConfigError(
                f"constraints cover {self.constraints.steps} steps, model runs {self.model.steps}"
            )
        if self.selective.total_layers != self.model.layers:
            raise ConfigError("selective.total_layers must equal model.layers")
        if self.selective.depth > self.model.layers:
            raise ConfigError("layer ratio selects more layers than the model has")

    def to_json(self) -> dict:
        sel = asdict(self.selective)
        sel.pop("total_layers")
        cons = self.constraints.to_json()
        cons.pop("steps")
        search = asdict(self.search)
        search["eval_seeds"] = list(search["eval_seeds"])
        return {
            "schema": SCHEMA_VERSION,
            "model": self.model.to_json(),
            "constraints": cons,
            "search": search,
            "selective": sel,
            "output_dir": self.output_dir,
            "capture_snapshots": self.capture_snapshots,
        }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(raw: dict, preset: str | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    schema = raw.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema {schema!r}; expected {SCHEMA_VERSION}")
    name = preset or raw.get("preset")
    base = {}
    if name is not None:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[name]
    body = {k: v for k, v in raw.items() if k not in ("schema", "preset")}
    merged = _merge(base, body)
    known = {"model", "constraints", "search", "selective", "output_dir", "capture_snapshots"}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = ModelConfig.from_json(merged.get("model", {}))
        cons = dict(merged.get("constraints", {}))
        cons.setdefault("steps", model.steps)
        constraints = ConstraintSet(**cons)
        search = SearchConfig(**merged.get("search", {}))
        sel = dict(merged.get("selective", {"layer_ratio": 0.25, "token_ratio": 0.3}))
        sel.setdefault("total_layers", model.layers)
        selective = SelectiveConfig(**sel)
    except TypeError as exc:
        raise ConfigError(f"bad config field: {exc}") from exc
    return ExperimentConfig(
        model,
        constraints,
        search,
        selective,
        str(merged.get("output_dir", "out")),
        bool(merged.get("capture_snapshots", False)),
    )


def load(path=None, preset: str | None = None) -> ExperimentConfig:
    if path is None:
        if preset is None:
            raise ConfigError("give --config or --preset")
        return from_dict({}, preset)
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(raw, preset)
