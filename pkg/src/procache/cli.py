"""``procache`` command line: enumerate, search, run, bench, report.

Exit codes: 0 ok, 2 configuration error, 3 infeasible search, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import config as configmod
from .errors import ConfigError, InfeasibleSearchError, ProCacheError
from .evaluate import Simulator
from .metrics import (
    EvalReport,
    block_error_profile,
    consecutive_output_delta,
    curves_to_csv,
    flops_estimate,
    layer_error_curves,
)
from .pattern import (
    CachingPattern,
    activation_profile,
    count_patterns,
    enumerate_patterns,
    sample_patterns,
    select_best_pattern,
)

ATTEMPT_LEVELS = (10**3, 10**4, 10**5, 10**6)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _outdir(exp, args) -> Path:
    out = Path(args.out or exp.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    exp = configmod.load(args.config, args.preset)
    if args.seed is not None:
        exp = replace(exp, search=replace(exp.search, seed=args.seed))
    return exp


def _infeasible_reason(cs) -> str:
    span = cs.steps - 1 - cs.tail_limit  # steps that activations must cover after step 1
    reach = (cs.budget - 1) * (cs.v_max + 1)
    if reach < span:
        return (
            f"{cs.budget} activations with gaps <= {cs.v_max} reach step {1 + reach}, "
            f"but the tail limit {cs.tail_limit} requires reaching step {cs.steps - cs.tail_limit}"
        )
    return "no interval composition satisfies the budget, bounds and tail limit"


def cmd_enumerate(args) -> int:
    exp = _load(args)
    cs = exp.constraints
    if args.monotonic is not None:
        cs = cs.with_monotonic(args.monotonic)
    count = count_patterns(cs)
    report = {
        "constraints": cs.to_json(),
        "count": count,
        "attempts": 0,
        "rejections": {"budget": 0, "bounded": 0, "monotonic": 0},
    }
    if count == 0:
        report["explanation"] = _infeasible_reason(cs)
    print(f"valid patterns: {count}")
    if count == 0:
        print(f"  infeasible: {report['explanation']}")
    out = _outdir(exp, args)
    if args.list:
        pats = enumerate_patterns(cs)
        _write_json(out / "patterns.json", [str(p) for p in pats])
    if args.compare_sampler:
        proposal = args.proposal or exp.search.proposal
        sc = replace(exp.search, quota=max(count, 1), max_attempts=max(ATTEMPT_LEVELS), proposal=proposal)
        t0 = time.perf_counter()
        rep = sample_patterns(cs, sc, enforce_monotonic=cs.require_monotonic, checkpoints=ATTEMPT_LEVELS)
        elapsed = time.perf_counter() - t0
        report["attempts"] = rep.attempts
        report["rejections"] = rep.rejections
        report["duplicates"] = rep.duplicates
        report["proposal"] = proposal
        report["sampler"] = [{"max_attempts": a, "found": rep.found_at[a]} for a in ATTEMPT_LEVELS]
        print(f"{'max attempts':>13} {'found':>6}")
        for a in ATTEMPT_LEVELS:
            print(f"{a:>13} {rep.found_at[a]:>6}")
        print(f"sampler used {rep.attempts} attempts ({elapsed:.2f}s, informational)")
    _write_json(out / "enumeration.json", report)
    return 0


def _search(exp, sim: Simulator):
    cs = exp.constraints
    rep = sample_patterns(cs, exp.search, enforce_monotonic=cs.require_monotonic)
    if rep.empty:
        raise InfeasibleSearchError(
            f"no valid pattern within {rep.attempts} attempts", rep.to_json()
        )
    winner, evals = select_best_pattern(rep.patterns, sim, exp.search)
    return winner, evals, rep


def cmd_search(args) -> int:
    exp = _load(args)
    out = _outdir(exp, args)
    sim = Simulator(exp.model, None if args.no_selective else exp.selective)
    try:
        winner, evals, rep = _search(exp, sim)
    except InfeasibleSearchError as exc:
        _write_json(out / "search_failure.json", exc.report)
        raise
    rows = [
        [i, str(e.pattern), e.pattern.activations, repr(e.proxy_score), repr(e.flops_ratio),
         int(e is winner)]
        for i, e in enumerate(evals, start=1)
    ]
    _write_csv(out / "candidates.csv", ["candidate", "bits", "activations", "proxy_score", "flops_ratio", "winner"], rows)
    meta = {
        "budget": exp.constraints.budget,
        "v_min": exp.constraints.v_min,
        "v_max": exp.constraints.v_max,
        "seed": exp.search.seed,
        "proxy_score": winner.proxy_score,
        "flops_ratio": winner.flops_ratio,
        "sampler": rep.to_json(),
    }
    winner.pattern.save(out / "best_pattern.json", meta)
    for r in rows:
        print(f"  #{r[0]} {r[1]}  score={float(r[3]):.6f}  flops={float(r[4]):.4f}{'  <- best' if r[5] else ''}")
    return 0


def _report(exp, sim: Simulator, pattern: CachingPattern, out: Path | None, capture: bool, step=None) -> EvalReport:
    seeds = list(exp.search.eval_seeds)
    scores = sim.scores(pattern, seeds, exp.search.eval_batch)
    plan = sim.plan(pattern)
    flops = flops_estimate(plan, exp.model, sim.selective)
    sel = None
    if sim.selective is not None:
        sel = {"layer_ratio": sim.selective.layer_ratio, "token_ratio": sim.selective.token_ratio,
               "layers": sorted(plan.selective_layers), "steps": sorted(plan.selective_steps)}
    report = EvalReport(sum(scores) / len(scores), flops, list(pattern.bits), sel, seeds, per_seed=scores)
    if out is not None:
        plan.dump(out / "plan.csv", out / "plan_summary.json")
    if capture and out is not None:
        base = sim.baseline(seeds[0], 0, capture=True)
        cached = sim.run(pattern, seeds[0], 0, capture=True)
        if step is None:
            zeros = [t for t, b in enumerate(pattern.bits, start=1) if not b]
            step = zeros[-1] if zeros else pattern.length
        (out / "fig1_layer_error.csv").write_text(curves_to_csv(layer_error_curves(cached.features, base.features)))
        (out / "fig2_output_delta.csv").write_text(curves_to_csv([consecutive_output_delta(base.outputs)]))
        (out / "fig3_block_error.csv").write_text(
            curves_to_csv([block_error_profile(cached.features, base.features, step)])
        )
        report.curves = {
            "fig1": "fig1_layer_error.csv",
            "fig2": "fig2_output_delta.csv",
            "fig3": "fig3_block_error.csv",
            "fig3_step": step,
        }
    return report


def cmd_run(args) -> int:
    exp = _load(args)
    if not args.pattern:
        raise ConfigError("run needs --pattern")
    pattern = CachingPattern.load(args.pattern)
    if pattern.length != exp.model.steps:
        raise ConfigError(f"pattern has {pattern.length} steps, model runs {exp.model.steps}")
    out = _outdir(exp, args)
    sim = Simulator(exp.model, None if args.no_selective else exp.selective)
    report = _report(exp, sim, pattern, out, exp.capture_snapshots or args.capture, args.step)
    _write_json(out / "report.json", report.to_json())
    _write_json(out / "flops.json", report.flops.to_json())
    print(f"proxy_score={report.proxy_score:.6f} ratio={report.flops.ratio:.4f} speedup={report.flops.speedup:.3f}")
    return 0


def uniform_pattern(steps: int, budget: int) -> CachingPattern:
    """Activation every ceil(T/B) steps starting at step 1."""
    return CachingPattern.uniform(steps, math.ceil(steps / budget))


def bench_rows(exp, searched: CachingPattern, sim: Simulator | None = None):
    """(variant, pattern, FlopsReport, proxy_score) for the four ablation rows."""
    sim = sim or Simulator(exp.model, None)
    pure = sim.with_selective(None)
    sel = sim.with_selective(exp.selective)
    T = exp.model.steps
    uni = uniform_pattern(T, exp.constraints.budget)
    variants = [
        ("baseline", CachingPattern.all_ones(T), pure),
        (f"uniform-{math.ceil(T / exp.constraints.budget)}", uni, pure),
        ("searched", searched, pure),
        ("searched+selective", searched, sel),
    ]
    rows = []
    for name, pat, s in variants:
        score, _ = s.evaluate(pat, exp.search.eval_seeds, exp.search.eval_batch)
        rows.append((name, pat, flops_estimate(s.plan(pat), exp.model, s.selective), score))
    return rows


def cmd_bench(args) -> int:
    exp = _load(args)
    out = _outdir(exp, args)
    t0 = time.perf_counter()
    sim = Simulator(exp.model, None)
    if args.pattern:
        searched = CachingPattern.load(args.pattern)
        if searched.length != exp.model.steps:
            raise ConfigError(f"pattern has {searched.length} steps, model runs {exp.model.steps}")
    else:
        searched = _search(exp, sim.with_selective(exp.selective))[0].pattern
    rows = bench_rows(exp, searched, sim)
    table = [
        {"variant": name, "bits": str(p), "activations": p.activations, "flops_ratio": f.ratio,
         "speedup": f.speedup, "selective_overhead": f.selective_overhead, "proxy_score": s}
        for name, p, f, s in rows
    ]
    _write_csv(
        out / "bench.csv",
        list(table[0]),
        [[r["variant"], r["bits"], r["activations"], repr(r["flops_ratio"]), repr(r["speedup"]),
          repr(r["selective_overhead"]), repr(r["proxy_score"])] for r in table],
    )
    _write_json(out / "bench.json", {"config": exp.to_json(), "rows": table})
    print(f"{'variant':<20} {'ratio':>7} {'speedup':>8} {'proxy':>10}")
    for r in table:
        print(f"{r['variant']:<20} {r['flops_ratio']:>7.4f} {r['speedup']:>8.3f} {r['proxy_score']:>10.6f}")
    print(f"wall time {time.perf_counter() - t0:.2f}s (informational)")
    return 0


def cmd_report(args) -> int:
    """Summarise the artifacts found in an output directory."""
    exp_out = Path(args.out or "out")
    if not exp_out.is_dir():
        raise ConfigError(f"no output directory {exp_out}")
    found = False
    for name in ("enumeration.json", "best_pattern.json", "report.json", "bench.json"):
        path = exp_out / name
        if not path.exists():
            continue
        found = True
        data = json.loads(path.read_text())
        print(f"== {name}")
        if name == "enumeration.json":
            print(f"count={data['count']} attempts={data['attempts']} rejections={data['rejections']}")
            for row in data.get("sampler", []):
                print(f"  {row['max_attempts']:>9} attempts -> {row['found']} found")
        elif name == "best_pattern.json":
            bits = data["bits"]
            prof = activation_profile(bits) if bits and bits[0] == 1 else None
            print("".join(map(str, bits)), f"score={data['meta'].get('proxy_score')}")
            if prof:
                print(f"  activations={prof.count} intervals={list(prof.intervals)}")
        elif name == "report.json":
            f = data["flops"]
            print(f"proxy_score={data['proxy_score']} ratio={f['ratio']:.4f} speedup={f['speedup']:.3f}")
        else:
            for r in data["rows"]:
                print(f"  {r['variant']:<20} ratio={r['flops_ratio']:.4f} proxy={r['proxy_score']:.6f}")
    if not found:
        raise ConfigError(f"no procache artifacts in {exp_out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procache", description="Constraint-aware caching schedules on a toy DiT")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--preset", choices=sorted(configmod.PRESETS), help="named hyperparameter preset")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="sampler seed (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("enumerate", parents=[common], help="count the feasible pattern space")
    p.add_argument("--list", action="store_true", help="write every pattern to patterns.json")
    p.add_argument("--compare-sampler", action="store_true", help="tabulate sampler discoveries vs attempts")
    p.add_argument("--proposal", choices=("bits", "intervals"))
    mono = p.add_mutually_exclusive_group()
    mono.add_argument("--monotonic", dest="monotonic", action="store_true", default=None)
    mono.add_argument("--no-monotonic", dest="monotonic", action="store_false")
    p.set_defaults(func=cmd_enumerate)

    p = sub.add_parser("search", parents=[common], help="sample candidates and keep the best")
    p.add_argument("--no-selective", action="store_true", help="score candidates without selective computation")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("run", parents=[common], help="evaluate one pattern")
    p.add_argument("--pattern", help="pattern JSON file")
    p.add_argument("--no-selective", action="store_true", help="pure caching (ablation)")
    p.add_argument("--capture", action="store_true", help="emit error-curve CSVs")
    p.add_argument("--step", type=int, help="step for the per-block error profile")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", parents=[common], help="baseline / uniform / searched / searched+selective")
    p.add_argument("--pattern", help="use this pattern instead of searching")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", parents=[common], help="summarise an output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ProCacheError as exc:
        print(f"procache: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
