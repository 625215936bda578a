"""Caching patterns: representation, feasibility checks, sampling, enumeration.

A pattern is a 0/1 sequence over denoising steps (1 = compute, 0 = reuse the
cache). Steps are 1-based everywhere in the public API.

Endpoint convention: step 1 always computes (there is nothing to reuse yet),
and the trailing run of cached steps after the last activation counts as a
reuse interval for the upper bound, i.e. it may be at most ``tail_limit``
steps long (``v_max`` unless overridden).
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .rng import SplitMix64

MAX_ENUM_STEPS = 64
BUDGET, MONOTONIC, BOUNDED = "budget", "monotonic", "bounded"
PROPOSALS = ("bits", "intervals")


@dataclass(frozen=True)
class CachingPattern:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        object.__setattr__(self, "bits", bits)
        if not bits:
            raise ConfigError("pattern must have at least one step")
        if any(b not in (0, 1) for b in bits):
            raise ConfigError(f"pattern entries must be 0 or 1, got {bits}")
        if bits[0] != 1:
            raise ConfigError("the first step of a pattern must compute (bits[1] = 1)")

    @property
    def length(self) -> int:
        return len(self.bits)

    @property
    def activations(self) -> int:
        return sum(self.bits)

    @classmethod
    def from_code(cls, code: int, steps: int) -> "CachingPattern":
        """Inverse of :attr:`code`: bit ``t-1`` of ``code`` is ``s_t``."""
        return cls(tuple((code >> i) & 1 for i in range(steps)))

    @property
    def code(self) -> int:
        return sum(b << i for i, b in enumerate(self.bits))

    @classmethod
    def all_ones(cls, steps: int) -> "CachingPattern":
        return cls((1,) * steps)

    @classmethod
    def uniform(cls, steps: int, every: int) -> "CachingPattern":
        """FORA-style schedule: compute at steps 1, 1+N, 1+2N, ..."""
        if every < 1:
            raise ConfigError("uniform interval must be >= 1")
        return cls(tuple(1 if t % every == 0 else 0 for t in range(steps)))

    def __str__(self) -> str:
        return "".join(map(str, self.bits))

    def to_json(self, meta: dict | None = None) -> dict:
        return {"steps": self.length, "bits": list(self.bits), "meta": dict(meta or {})}

    @classmethod
    def from_json(cls, obj: dict) -> "CachingPattern":
        try:
            bits = obj["bits"]
            steps = obj.get("steps", len(bits))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"malformed pattern object: {exc}") from exc
        if steps != len(bits):
            raise ConfigError(f"pattern declares {steps} steps but has {len(bits)} bits")
        return cls(tuple(bits))

    def save(self, path, meta: dict | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(meta), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CachingPattern":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read pattern file {path}: {exc}") from exc


@dataclass(frozen=True)
class ActivationProfile:
    timestamps: tuple[int, ...]
    intervals: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.timestamps)


@dataclass(frozen=True)
class ConstraintSet:
    steps: int
    budget: int
    v_min: int
    v_max: int
    require_monotonic: bool = False
    # None -> trailing cached run bounded by v_max
    max_tail: int | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 1 <= self.budget <= self.steps:
            raise ConfigError(f"budget must lie in [1, {self.steps}], got {self.budget}")
        if not 0 <= self.v_min <= self.v_max:
            raise ConfigError(f"need 0 <= v_min <= v_max, got [{self.v_min}, {self.v_max}]")
        if self.v_max >= self.steps and self.steps > 1:
            raise ConfigError(f"v_max must be < steps ({self.steps}), got {self.v_max}")
        if self.max_tail is not None and self.max_tail < 0:
            raise ConfigError("max_tail must be >= 0")

    @property
    def tail_limit(self) -> int:
        return self.v_max if self.max_tail is None else self.max_tail

    def with_monotonic(self, flag: bool) -> "ConstraintSet":
        return ConstraintSet(self.steps, self.budget, self.v_min, self.v_max, flag, self.max_tail)

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "budget": self.budget,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "require_monotonic": self.require_monotonic,
            "max_tail": self.max_tail,
        }


@dataclass(frozen=True)
class SearchConfig:
    quota: int = 5
    max_attempts: int = 10**6
    seed: int = 0
    eval_seeds: tuple[int, ...] = (0,)
    eval_batch: int = 1
    # "bits": uniform per-bit proposal; "intervals": random walk over reuse intervals
    proposal: str = "bits"

    def __post_init__(self):
        object.__setattr__(self, "eval_seeds", tuple(self.eval_seeds))
        if self.quota < 1:
            raise ConfigError("quota must be >= 1")
        if self.max_attempts < self.quota:
            raise ConfigError("max_attempts must be >= quota")
        if self.eval_batch < 1 or not self.eval_seeds:
            raise ConfigError("need at least one evaluation seed and eval_batch >= 1")
        if self.proposal not in PROPOSALS:
            raise ConfigError(f"unknown proposal {self.proposal!r}; choose from {PROPOSALS}")


@dataclass(frozen=True)
class CandidateEvaluation:
    pattern: CachingPattern
    proxy_score: float
    flops_ratio: float

    def sort_key(self):
        return (self.proxy_score, self.flops_ratio, self.pattern.bits)


@dataclass
class SampleReport:
    """Outcome of :func:`sample_patterns`.

    ``found_at`` maps each requested checkpoint (attempt count) to the number
    of distinct valid patterns held after that many attempts.
    """

    patterns: list[CachingPattern]
    attempts: int
    rejections: dict[str, int]
    duplicates: int = 0
    found_at: dict[int, int] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.patterns

    def to_json(self) -> dict:
        return {
            "count": len(self.patterns),
            "attempts": self.attempts,
            "rejections": dict(self.rejections),
            "duplicates": self.duplicates,
            "found_at": {str(k): v for k, v in sorted(self.found_at.items())},
        }


def _bits_of(pattern) -> tuple[int, ...]:
    return pattern.bits if isinstance(pattern, CachingPattern) else tuple(int(b) for b in pattern)


def activation_profile(pattern) -> ActivationProfile:
    bits = _bits_of(pattern)
    ts = tuple(t for t, b in enumerate(bits, start=1) if b)
    return ActivationProfile(ts, tuple(b - a - 1 for a, b in zip(ts, ts[1:])))


def _violations_code(code: int, steps: int, cs: ConstraintSet, monotonic: bool) -> list[str]:
    out = []
    if code.bit_count() > cs.budget:
        out.append(BUDGET)
    prev_t = None
    prev_v = None
    bounded_ok = True
    mono_ok = True
    c = code
    while c:
        low = c & -c
        t = low.bit_length()
        c ^= low
        if prev_t is not None:
            v = t - prev_t - 1
            if v < cs.v_min or v > cs.v_max:
                bounded_ok = False
            if prev_v is not None and v > prev_v:
                mono_ok = False
            prev_v = v
        prev_t = t
    if prev_t is not None and steps - prev_t > cs.tail_limit:
        bounded_ok = False
    if not bounded_ok:
        out.append(BOUNDED)
    if monotonic and not mono_ok:
        out.append(MONOTONIC)
    return out


def check_constraints(pattern, cs: ConstraintSet) -> list[str]:
    """Names of the violated constraints; an empty list means feasible.

    ``monotonic`` is only examined when ``cs.require_monotonic`` is set.
    """
    bits = _bits_of(pattern)
    if len(bits) != cs.steps:
        raise ConfigError(f"pattern has {len(bits)} steps, constraints expect {cs.steps}")
    code = sum(b << i for i, b in enumerate(bits))
    return _violations_code(code, cs.steps, cs, cs.require_monotonic)


def _first_violation(code: int, cs: ConstraintSet, monotonic: bool) -> str | None:
    # check order: budget, then intervals; monotonic last as a post-filter
    v = _violations_code(code, cs.steps, cs, monotonic)
    return v[0] if v else None


def sample_patterns(
    cs: ConstraintSet,
    sc: SearchConfig,
    *,
    enforce_monotonic: bool = False,
    checkpoints: Iterable[int] = (),
) -> SampleReport:
    """Rejection-sample distinct feasible patterns.

    Only budget and bounded are enforced unless ``enforce_monotonic`` is set.
    Stops as soon as ``sc.quota`` distinct patterns are held or after
    ``sc.max_attempts`` proposals. Deterministic in ``sc.seed``.
    """
    if sc.proposal == "bits":
        found, attempts, rej, dups = _sample_bits(cs, sc, enforce_monotonic)
    else:
        found, attempts, rej, dups = _sample_intervals(cs, sc, enforce_monotonic)
    hit_attempts = [a for a, _ in found]
    found_at = {
        c: bisect.bisect_right(hit_attempts, c) for c in checkpoints if c <= sc.max_attempts
    }
    pats = [CachingPattern.from_code(code, cs.steps) for _, code in found]
    return SampleReport(pats, attempts, rej, dups, found_at)


def _new_tally():
    return {BUDGET: 0, BOUNDED: 0, MONOTONIC: 0}


def _sample_bits(cs, sc, monotonic):
    free = cs.steps - 1
    words = max(1, -(-free // 64))
    rng = SplitMix64(sc.seed)
    seen: set[int] = set()
    found: list[tuple[int, int]] = []
    rej = _new_tally()
    dups = 0
    done = 0
    batch = 1 << 16
    while done < sc.max_attempts and len(found) < sc.quota:
        n = min(batch, sc.max_attempts - done)
        raw = rng.block(n * words).reshape(n, words)
        if words == 1:
            free_bits = raw[:, 0] & np.uint64((1 << free) - 1) if free else raw[:, 0] * 0
            ones = np.bitwise_count(free_bits).astype(np.int64) + 1
            cand = np.flatnonzero(ones <= cs.budget)
            codes = None
        else:
            codes = [_join_words(row, free) for row in raw.tolist()]
            ones = np.array([c.bit_count() for c in codes], dtype=np.int64)
            cand = np.flatnonzero(ones <= cs.budget)
        stop = n
        for i in cand.tolist():
            code = (int(free_bits[i]) << 1 | 1) if codes is None else codes[i]
            why = _first_violation(code, cs, monotonic)
            if why is not None:
                rej[why] += 1
                continue
            if code in seen:
                dups += 1
                continue
            seen.add(code)
            found.append((done + i + 1, code))
            if len(found) >= sc.quota:
                stop = i + 1
                break
        rej[BUDGET] += int(np.count_nonzero(ones[:stop] > cs.budget))
        done += stop
    return found, done, rej, dups


def _join_words(row: Sequence[int], free: int) -> int:
    v = 0
    for k, w in enumerate(row):
        v |= int(w) << (64 * k)
    return (v & ((1 << free) - 1)) << 1 | 1


def _sample_intervals(cs, sc, monotonic):
    """Random walk from step 1: at each activation pick uniformly among
    'stop here' (allowed when the remaining tail fits) and every gap in
    ``[v_min, upper]`` that still lands inside the horizon. With
    ``monotonic`` the upper end shrinks to the previous gap."""
    T, lo, tail = cs.steps, cs.v_min, cs.tail_limit
    rng = SplitMix64(sc.seed)
    # moves[pos][upper] = (admissible gap count, stop allowed)
    moves = [[(0, False)] * (cs.v_max + 1) for _ in range(T + 1)]
    for pos in range(1, T + 1):
        for upper in range(lo, cs.v_max + 1):
            hi = min(upper, T - pos - 1)
            moves[pos][upper] = (hi - lo + 1 if hi >= lo else 0, T - pos <= tail)
    seen: set[int] = set()
    rejected: dict[int, str | None] = {}
    found = []
    rej = _new_tally()
    dups = 0
    attempts = 0
    buf, i = [], 0
    while attempts < sc.max_attempts and len(found) < sc.quota:
        attempts += 1
        cur, upper, code = 1, cs.v_max, 1
        dead = False
        while True:
            n_gaps, can_stop = moves[cur][upper]
            n = n_gaps + can_stop
            if n == 0:
                dead = True
                break
            if i == len(buf):
                buf, i = rng.block(1 << 16).tolist(), 0
            k = (buf[i] * n) >> 64
            i += 1
            if k == n_gaps:
                break
            cur += lo + k + 1
            code |= 1 << (cur - 1)
            if monotonic:
                upper = lo + k
        if dead:
            rej[BOUNDED] += 1
        elif code in seen:
            # already validated when first seen
            dups += 1
        else:
            if code not in rejected:
                rejected[code] = _first_violation(code, cs, monotonic)
            why = rejected[code]
            if why is not None:
                rej[why] += 1
                continue
            seen.add(code)
            found.append((attempts, code))
    return found, attempts, rej, dups


def _guard(cs: ConstraintSet) -> None:
    if cs.steps > MAX_ENUM_STEPS:
        raise ConfigError(
            f"enumeration refused: steps={cs.steps} exceeds the tractability bound {MAX_ENUM_STEPS}"
        )


def enumerate_patterns(cs: ConstraintSet) -> list[CachingPattern]:
    """Every feasible pattern, by depth-first composition of reuse intervals.

    Honours ``cs.require_monotonic``. Order: gaps ascending, shorter
    sequences before their extensions.
    """
    _guard(cs)
    T, out = cs.steps, []

    def walk(pos: int, m: int, prev: int | None, code: int) -> None:
        if T - pos <= cs.tail_limit:
            out.append(code)
        if m >= cs.budget:
            return
        hi = cs.v_max if (prev is None or not cs.require_monotonic) else min(cs.v_max, prev)
        for g in range(cs.v_min, hi + 1):
            nxt = pos + g + 1
            if nxt > T:
                break
            walk(nxt, m + 1, g, code | 1 << (nxt - 1))

    walk(1, 1, None, 1)
    return [CachingPattern.from_code(c, T) for c in out]


def count_patterns(cs: ConstraintSet) -> int:
    """Size of the feasible set without materialising it (memoised recursion)."""
    _guard(cs)
    T = cs.steps

    @lru_cache(maxsize=None)
    def n(pos: int, m: int, prev: int) -> int:
        total = 1 if T - pos <= cs.tail_limit else 0
        if m >= cs.budget:
            return total
        hi = min(cs.v_max, prev) if cs.require_monotonic else cs.v_max
        for g in range(cs.v_min, hi + 1):
            if pos + g + 1 > T:
                break
            total += n(pos + g + 1, m + 1, g)
        return total

    return n(1, 1, cs.v_max)


def select_best_pattern(
    candidates: Sequence[CachingPattern],
    sim,
    sc: SearchConfig,
    *,
    map_fn: Callable = map,
) -> tuple[CandidateEvaluation, list[CandidateEvaluation]]:
    """Score every candidate and return ``(winner, all_evaluations)``.

    ``sim.evaluate(pattern, seeds, batch)`` must return
    ``(proxy_score, flops_ratio)``. Ties on score go to the cheaper pattern,
    then to the lexicographically smaller bit string. ``map_fn`` may be an
    executor's ordered ``map``; results are reduced in candidate order.
    """
    if not candidates:
        raise ConfigError("select_best_pattern needs at least one candidate")

    def score(p):
        return sim.evaluate(p, sc.eval_seeds, sc.eval_batch)

    results = list(map_fn(score, candidates))
    evals = [CandidateEvaluation(p, float(s), float(f)) for p, (s, f) in zip(candidates, results)]
    return min(evals, key=CandidateEvaluation.sort_key), evals
