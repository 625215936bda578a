"""A small deterministic diffusion transformer with residual-branch caches.

Every block is ``SA -> CA -> MLP``; each sub-module ``m`` adds a gated,
AdaLN-modulated branch to the residual stream::

    shift, scale, gate = W_m @ temb + b_m
    b = gate * f_m(LN(x) * (1 + scale) + shift)
    x = x + b

The network sees the latent rescaled to unit RMS (an input preconditioner in
the spirit of EDM's ``c_in``); an untrained epsilon predictor lets the latent
norm grow by two orders of magnitude over a run, and without the rescale the
residual stream would be dominated by that growth. The timestep enters as
low-order cosine/sine features of ``tau / train_steps`` so that conditioning
drifts smoothly along the trajectory, as a trained timestep MLP would make it.

The branch output ``b`` is what gets cached. All arithmetic is float64 and
every matrix product goes through :class:`FlopCounter` so the analytic cost
model in :mod:`procache.metrics` can be checked against what actually ran.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, RunStateError
from .schedule import ExecutionPlan, StepAction

SUBMODULES = ("SA", "CA", "MLP")

# flop constants; one multiply-accumulate = 2 flops
FLOPS_PER_MAC = 2
FLOPS_NORM = 5  # per element: LayerNorm + AdaLN shift/scale
FLOPS_SOFTMAX = 5  # per score
FLOPS_GELU = 5  # per hidden activation
FLOPS_GATE = 1  # per element
FLOPS_ADD = 1  # per element, residual add
FLOPS_UPDATE = 3  # per element, x <- a*x + b*eps
FLOPS_INPUT_SCALE = 3  # per element: square, sum, rescale to unit RMS
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 8
    dim: int = 64
    heads: int = 4
    tokens: int = 16
    context_tokens: int = 8
    mlp_ratio: float = 4.0
    steps: int = 20
    seed: int = 42
    beta_start: float = 1e-4
    beta_end: float = 0.02
    train_steps: int = 1000
    # engine switches for the unresolved readings of selective computation
    sa_mode: str = "recompute"  # or "reuse": SA branch replayed in selective steps
    remodulate: bool = False  # re-gate cached branches with the current step's AdaLN
    token_scope: str = "layer"  # or "step": one token set per step, shared by layers

    def __post_init__(self):
        for name in ("layers", "dim", "heads", "tokens", "context_tokens", "steps", "train_steps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0 or self.hidden < 1:
            raise ConfigError("mlp_ratio must give a hidden width >= 1")
        if self.steps > self.train_steps:
            raise ConfigError("steps cannot exceed train_steps")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.sa_mode not in ("recompute", "reuse"):
            raise ConfigError(f"sa_mode must be 'recompute' or 'reuse', got {self.sa_mode!r}")
        if self.token_scope not in ("layer", "step"):
            raise ConfigError(f"token_scope must be 'layer' or 'step', got {self.token_scope!r}")

    @property
    def hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class ModelWeights:
    """Per-layer parameter dicts plus the output head; treat as immutable."""

    layers: list[dict[str, np.ndarray]]
    head: np.ndarray

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for layer in self.layers:
            for k in sorted(layer):
                h.update(k.encode())
                h.update(np.ascontiguousarray(layer[k]).tobytes())
        h.update(self.head.tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig) -> ModelWeights:
    """Draw weights from ``numpy.random.default_rng(seed)``.

    Projections are N(0, 1/fan_in). Modulation maps are small so that the
    gates sit near their biases (0.5) and scale/shift near zero.
    """
    rng = np.random.default_rng(config.seed)
    d, hd = config.dim, config.hidden

    def proj(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)

    layers = []
    for _ in range(config.layers):
        p = {}
        for name in ("q", "k", "v", "o"):
            p[f"sa_{name}"] = proj(d, d)
        for name in ("q", "k", "v", "o"):
            p[f"ca_{name}"] = proj(d, d)
        p["mlp_in"] = proj(d, hd)
        p["mlp_out"] = proj(hd, d)
        for m in SUBMODULES:
            p[f"mod_{m}_w"] = 0.1 * proj(d, 3 * d)
            bias = np.zeros(3 * d)
            bias[2 * d :] = 0.5
            p[f"mod_{m}_b"] = bias
        layers.append(p)
    return ModelWeights(layers, proj(d, d))


def make_inputs(config: ModelConfig, seed: int, index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded initial latent ``x0`` (N x d) and cross-attention context (N_ctx x d)."""
    rng = np.random.default_rng([config.seed, seed, index])
    x0 = rng.standard_normal((config.tokens, config.dim))
    ctx = rng.standard_normal((config.context_tokens, config.dim))
    return x0, ctx


def ddim_schedule(config: ModelConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Timesteps and the linear update coefficients per sampling step.

    Linear betas over ``train_steps``; sampling timesteps evenly spaced from
    the last training step down to 0. Deterministic DDIM (eta = 0) collapses
    to ``x <- a_t * x + b_t * eps``.
    """
    betas = np.linspace(config.beta_start, config.beta_end, config.train_steps)
    abar = np.cumprod(1.0 - betas)
    ts = np.round(np.linspace(config.train_steps - 1, 0, config.steps)).astype(int)
    a = np.empty(config.steps)
    b = np.empty(config.steps)
    for i, tau in enumerate(ts):
        ab_t = abar[tau]
        ab_prev = abar[ts[i + 1]] if i + 1 < config.steps else 1.0
        a[i] = math.sqrt(ab_prev / ab_t)
        b[i] = math.sqrt(1.0 - ab_prev) - a[i] * math.sqrt(1.0 - ab_t)
    return ts, a, b


def timestep_embedding(tau: int, dim: int, train_steps: int = 1000) -> np.ndarray:
    """``[cos(pi*m_k*u), sin(pi*m_k*u)]`` with ``u = tau / train_steps`` and
    harmonic orders ``m_k = (k + 1) / 8`` for ``k < dim // 2``; odd ``dim`` pads
    one zero."""
    half = dim // 2
    orders = (np.arange(half) + 1) / 8.0
    ang = math.pi * orders * (tau / train_steps)
    emb = np.concatenate([np.cos(ang), np.sin(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


class FlopCounter:
    """Tallies flops per category as operations execute."""

    def __init__(self):
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str, n: int) -> None:
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)

    def mm(self, a: np.ndarray, b: np.ndarray, kind: str = "matmul") -> np.ndarray:
        out = a @ b
        # batched: (..., m, k) @ (..., k, n)
        self.add(kind, FLOPS_PER_MAC * out.size * a.shape[-1])
        return out

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())


class _NullCounter(FlopCounter):
    def add(self, kind, n):
        pass


@dataclass
class TokenSelection:
    importance: np.ndarray
    selected: np.ndarray  # ascending token indices (0-based)


def token_importance(values: np.ndarray) -> np.ndarray:
    """Euclidean norm of each token's value vector (heads concatenated)."""
    return np.sqrt(np.einsum("ij,ij->i", values, values))


def select_tokens(importance, p: float) -> TokenSelection:
    """Top ``max(1, floor(p * N))`` tokens; ties go to the lower index."""
    imp = np.asarray(importance, dtype=float)
    n = imp.shape[0]
    if n < 1 or not 0 < p <= 1:
        raise ConfigError(f"need N >= 1 and 0 < p <= 1, got N={n}, p={p}")
    k = max(1, math.floor(p * n + 1e-9))
    order = np.lexsort((np.arange(n), -imp))
    return TokenSelection(imp, np.sort(order[:k]))


@dataclass
class BlockCache:
    """Cached branch outputs per (layer, submodule), 1-based layers."""

    layers: int
    tokens: int
    values: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    last_refresh: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    def get(self, t: int, layer: int, m: str) -> np.ndarray:
        try:
            return self.values[layer, m]
        except KeyError:
            raise RunStateError(t, layer, m) from None

    def store(self, t: int, layer: int, m: str, branch: np.ndarray, rows=None) -> None:
        if rows is None:
            self.values[layer, m] = branch
            self.last_refresh[layer, m] = np.full(self.tokens, t)
        else:
            self.values[layer, m][rows] = branch
            self.last_refresh[layer, m][rows] = t


class TinyDiT:
    """Engine bound to one config and one set of weights."""

    def __init__(self, config: ModelConfig, weights: ModelWeights | None = None):
        self.config = config
        self.weights = weights if weights is not None else init_model(config)
        self.timesteps, self.coef_x, self.coef_eps = ddim_schedule(config)

    # -- sub-module pieces -------------------------------------------------
    def _modulation(self, layer: int, m: str, temb, fc):
        p = self.weights.layers[layer - 1]
        d = self.config.dim
        mod = fc.mm(temb, p[f"mod_{m}_w"], "adaln") + p[f"mod_{m}_b"]
        fc.add("adaln", 3 * d)
        return mod[:d], mod[d : 2 * d], mod[2 * d :]

    def _norm_mod(self, x, shift, scale, fc):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        fc.add("norm", FLOPS_NORM * x.size)
        return (x - mu) / np.sqrt(var + LN_EPS) * (1.0 + scale) + shift

    def _attend(self, q, k, v, fc, kind):
        h, dh = self.config.heads, self.config.head_dim
        n, m = q.shape[0], k.shape[0]
        qh = q.reshape(n, h, dh).transpose(1, 0, 2)
        kh = k.reshape(m, h, dh).transpose(1, 2, 0)
        vh = v.reshape(m, h, dh).transpose(1, 0, 2)
        s = fc.mm(qh, kh, kind) / math.sqrt(dh)
        s = s - s.max(axis=-1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=-1, keepdims=True)
        fc.add("softmax", FLOPS_SOFTMAX * s.size)
        return fc.mm(w, vh, kind).transpose(1, 0, 2).reshape(n, h * dh)

    def _sa_values(self, layer, x, shift, scale, fc):
        p = self.weights.layers[layer - 1]
        hn = self._norm_mod(x, shift, scale, fc)
        return hn, fc.mm(hn, p["sa_v"], "sa")

    def _sa_branch(self, layer, hn, v, fc):
        p = self.weights.layers[layer - 1]
        q = fc.mm(hn, p["sa_q"], "sa")
        k = fc.mm(hn, p["sa_k"], "sa")
        a = self._attend(q, k, v, fc, "sa")
        return fc.mm(a, p["sa_o"], "sa")

    def _ca_branch(self, layer, hn, ctx, fc):
        p = self.weights.layers[layer - 1]
        q = fc.mm(hn, p["ca_q"], "ca")
        k = fc.mm(ctx, p["ca_k"], "ca")
        v = fc.mm(ctx, p["ca_v"], "ca")
        a = self._attend(q, k, v, fc, "ca")
        return fc.mm(a, p["ca_o"], "ca")

    def _mlp_branch(self, layer, hn, fc):
        p = self.weights.layers[layer - 1]
        z = fc.mm(hn, p["mlp_in"], "mlp")
        z = 0.5 * z * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (z + 0.044715 * z**3)))
        fc.add("gelu", FLOPS_GELU * z.size)
        return fc.mm(z, p["mlp_out"], "mlp")

    def _gated(self, gate, f, fc):
        fc.add("gate", FLOPS_GATE * f.size)
        return gate * f

    def _residual(self, x, b, fc):
        fc.add("residual", FLOPS_ADD * x.size)
        return x + b

    def _replay(self, t, layer, m, x, temb, cache, fc):
        c = cache.get(t, layer, m)
        if self.config.remodulate:
            # cache holds the ungated branch; gate it with this step's AdaLN
            p = self.weights.layers[layer - 1]
            d = self.config.dim
            gate = fc.mm(temb, p[f"mod_{m}_w"][:, 2 * d :], "adaln") + p[f"mod_{m}_b"][2 * d :]
            fc.add("adaln", d)
            c = self._gated(gate, c, fc)
        return self._residual(x, c, fc)

    def _store(self, t, layer, m, gate, f, cache, rows=None):
        if cache is None:
            return
        cache.store(t, layer, m, f if self.config.remodulate else gate * f, rows)

    # -- blocks --------------------------------------------------------------
    def block_full(self, x, layer, ctx, temb, t=0, cache=None, fc=None):
        """All three sub-modules over all tokens; refreshes the cache if given."""
        fc = fc or _NullCounter()
        shift, scale, gate = self._modulation(layer, "SA", temb, fc)
        hn, v = self._sa_values(layer, x, shift, scale, fc)
        f = self._sa_branch(layer, hn, v, fc)
        self._store(t, layer, "SA", gate, f, cache)
        x = self._residual(x, self._gated(gate, f, fc), fc)

        shift, scale, gate = self._modulation(layer, "CA", temb, fc)
        f = self._ca_branch(layer, self._norm_mod(x, shift, scale, fc), ctx, fc)
        self._store(t, layer, "CA", gate, f, cache)
        x = self._residual(x, self._gated(gate, f, fc), fc)

        shift, scale, gate = self._modulation(layer, "MLP", temb, fc)
        f = self._mlp_branch(layer, self._norm_mod(x, shift, scale, fc), fc)
        self._store(t, layer, "MLP", gate, f, cache)
        return self._residual(x, self._gated(gate, f, fc), fc)

    def block_selective(self, x, layer, ctx, temb, t, cache, p, fc=None, rows=None):
        """SA over all tokens (or replayed when ``sa_mode='reuse'``); CA and MLP
        recomputed on the top-``p`` tokens by SA value norm and scattered into
        the cache. Returns ``(x, selected_rows)``."""
        fc = fc or _NullCounter()
        for m in SUBMODULES:
            cache.get(t, layer, m)
        shift, scale, gate = self._modulation(layer, "SA", temb, fc)
        hn, v = self._sa_values(layer, x, shift, scale, fc)
        if rows is None:
            imp = token_importance(v)
            fc.add("importance", FLOPS_PER_MAC * v.size)
            rows = select_tokens(imp, p).selected
        if self.config.sa_mode == "recompute":
            f = self._sa_branch(layer, hn, v, fc)
            self._store(t, layer, "SA", gate, f, cache)
            x = self._residual(x, self._gated(gate, f, fc), fc)
        else:
            x = self._replay(t, layer, "SA", x, temb, cache, fc)

        for m in ("CA", "MLP"):
            shift, scale, gate = self._modulation(layer, m, temb, fc)
            hn = self._norm_mod(x[rows], shift, scale, fc)
            f = self._ca_branch(layer, hn, ctx, fc) if m == "CA" else self._mlp_branch(layer, hn, fc)
            if self.config.remodulate:
                cache.store(t, layer, m, f, rows)
                # every row, fresh or stale, gated with this step's modulation
                branch = self._gated(gate, cache.get(t, layer, m), fc)
            else:
                cache.store(t, layer, m, self._gated(gate, f, fc), rows)
                branch = cache.get(t, layer, m)
            x = self._residual(x, branch, fc)
        return x, rows

    def block_cached(self, x, layer, temb, t, cache, fc=None):
        fc = fc or _NullCounter()
        for m in SUBMODULES:
            x = self._replay(t, layer, m, x, temb, cache, fc)
        return x

    def block_forward(self, x, layer, action, cache, t, temb, ctx, p=1.0, fc=None):
        if action is StepAction.FULL:
            return self.block_full(x, layer, ctx, temb, t, cache, fc)
        if action is StepAction.SELECTIVE:
            return self.block_selective(x, layer, ctx, temb, t, cache, p, fc)[0]
        return self.block_cached(x, layer, temb, t, cache, fc)

    # -- full runs -----------------------------------------------------------
    def scale_input(self, x, fc):
        fc.add("input_scale", FLOPS_INPUT_SCALE * x.size)
        return x / np.sqrt(np.mean(x * x))

    def head(self, x, fc):
        fc.add("norm", FLOPS_NORM * x.size)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return fc.mm((x - mu) / np.sqrt(var + LN_EPS), self.weights.head, "head")

    def run(
        self,
        plan: ExecutionPlan | None,
        x0: np.ndarray,
        ctx: np.ndarray,
        *,
        token_ratio: float = 1.0,
        capture: bool = False,
        fc: FlopCounter | None = None,
    ) -> "RunResult":
        """Denoise ``x0`` for ``config.steps`` steps following ``plan``.

        ``plan=None`` runs the cache-free reference path (no cache object is
        ever created).
        """
        cfg = self.config
        if plan is not None and (plan.steps != cfg.steps or plan.layers != cfg.layers):
            raise ConfigError(
                f"plan is {plan.steps}x{plan.layers}, model expects {cfg.steps}x{cfg.layers}"
            )
        if x0.shape != (cfg.tokens, cfg.dim) or ctx.shape != (cfg.context_tokens, cfg.dim):
            raise ConfigError("input shapes do not match the model config")
        if not np.all(np.isfinite(x0)):
            raise NumericError("non-finite initial latent", 0, 0)
        fc = fc if fc is not None else _NullCounter()
        cache = None if plan is None else BlockCache(cfg.layers, cfg.tokens)
        x = np.array(x0, dtype=np.float64)
        features = [] if capture else None
        outputs = [] if capture else None
        selections: dict[tuple[int, int], np.ndarray] = {}
        for t in range(1, cfg.steps + 1):
            temb = timestep_embedding(int(self.timesteps[t - 1]), cfg.dim, cfg.train_steps)
            h = self.scale_input(x, fc)
            step_feats = []
            step_rows = None
            for layer in range(1, cfg.layers + 1):
                action = StepAction.FULL if plan is None else plan.action(t, layer)
                if action is StepAction.FULL:
                    h = self.block_full(h, layer, ctx, temb, t, cache, fc)
                elif action is StepAction.SELECTIVE:
                    shared = step_rows if cfg.token_scope == "step" else None
                    h, rows = self.block_selective(h, layer, ctx, temb, t, cache, token_ratio, fc, shared)
                    step_rows = rows
                    selections[t, layer] = rows
                else:
                    h = self.block_cached(h, layer, temb, t, cache, fc)
                if not np.all(np.isfinite(h)):
                    raise NumericError(f"non-finite features at step {t}, layer {layer}", t, layer)
                if capture:
                    step_feats.append(h.copy())
            eps = self.head(h, fc)
            fc.add("update", FLOPS_UPDATE * x.size)
            x = self.coef_x[t - 1] * x + self.coef_eps[t - 1] * eps
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite latent after step {t}", t, cfg.layers)
            if capture:
                features.append(step_feats)
                outputs.append(eps.copy())
        return RunResult(x, features, outputs, selections)


@dataclass
class RunResult:
    final: np.ndarray
    # features[t-1][l-1]: block output at step t, layer l (only when captured)
    features: list[list[np.ndarray]] | None
    # outputs[t-1]: network prediction at step t
    outputs: list[np.ndarray] | None
    selections: dict[tuple[int, int], np.ndarray]


def denoise_run(config, weights, plan, x0, context, *, token_ratio=1.0, capture=False, fc=None):
    return TinyDiT(config, weights).run(plan, x0, context, token_ratio=token_ratio, capture=capture, fc=fc)


def save_config(config: ModelConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config.to_json(), f, indent=2)
        f.write("\n")
