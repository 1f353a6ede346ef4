"""Command-line surface: plan, simulate, compare, sweep-k, validate.

All latencies print as fixed-precision milliseconds and memory as MiB so
identical configs produce byte-identical output.
"""

from __future__ import annotations

import argparse
import os
import sys

import yaml

from . import baselines, halda
from .errors import ConfigError, PlanningError
from .latency import (PartitionPlan, estimate_memory_usage, evaluate_tpot,
                      plan_from_dict, plan_to_dict)
from .profiles import ClusterSpec, load_cluster_spec
from .sim import export_trace, simulate

_SCHEDULERS = ("halda", "mem", "perf")


def _ms(seconds: float) -> str:
    return f"{seconds * 1e3:.3f}"


def _mib(nbytes: float) -> str:
    return f"{nbytes / (1 << 20):.1f}"


def _verbose() -> bool:
    return os.environ.get("RINGPLAN_VERBOSE", "") not in ("", "0")


def _make_plan(spec: ClusterSpec, scheduler: str,
               select: bool) -> tuple[ClusterSpec, PartitionPlan]:
    if scheduler == "mem":
        return spec, baselines.mem_sched(spec)
    if scheduler == "perf":
        return spec, baselines.perf_sched(spec)
    plan = halda.run(spec)
    if select:
        return halda.select_devices(spec, plan)
    return spec, plan


def _print_plan(spec: ClusterSpec, plan: PartitionPlan, out) -> None:
    usage = estimate_memory_usage(spec, plan)
    labels = [d.id + (" (relay)" if plan.w[i] == 0 else "")
              for i, d in enumerate(spec.devices)]
    width = max(12, max(map(len, labels)) + 1)
    header = f"{'device':<{width}} {'os':<8} {'backend':<8} {'w':>4} {'n':>4} " \
             f"{'ram MiB':>10} {'vram MiB':>10} {'overload':>9}"
    print(header, file=out)
    print("-" * len(header), file=out)
    for i, d in enumerate(spec.devices):
        u = usage[d.id]
        print(f"{labels[i]:<{width}} {d.os:<8} {d.backend:<8} {plan.w[i]:>4} {plan.n[i]:>4} "
              f"{_mib(u.ram_demand):>10} {_mib(u.gpu_demand):>10} "
              f"{'yes' if u.overloaded else 'no':>9}", file=out)
    print(f"rounds per token (k): {plan.k}", file=out)
    print(f"analytical TPOT: {_ms(plan.objective)} ms", file=out)
    if _verbose():
        sets = plan.sets
        for name, members in (("class1", sets.m1), ("class2", sets.m2),
                              ("class3", sets.m3), ("class4", sets.m4),
                              ("forced", sets.m4_force)):
            if members:
                print(f"{name}: {', '.join(sorted(members))}", file=out)
    if not plan.converged:
        print("warning: planner hit its iteration cap; best found so far is shown",
              file=out)


def _cmd_plan(args, out) -> int:
    spec = load_cluster_spec(args.config)
    spec, plan = _make_plan(spec, args.scheduler, not args.no_select)
    _print_plan(spec, plan, out)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            yaml.safe_dump(plan_to_dict(spec, plan), fh, sort_keys=False)
        print(f"plan written to {args.out}", file=out)
    return 0


def _cmd_simulate(args, out) -> int:
    spec = load_cluster_spec(args.config)
    if args.plan:
        try:
            with open(args.plan, "r", encoding="utf-8") as fh:
                doc = yaml.safe_load(fh)
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot read plan file {args.plan}: {exc}"]) from exc
        plan = plan_from_dict(spec, doc)
    else:
        spec, plan = _make_plan(spec, args.scheduler, True)
    result = simulate(spec, plan, args.prompt_tokens, args.tokens,
                      mode=args.mode, prefetch=not args.no_prefetch)
    print(f"TTFT: {_ms(result.ttft)} ms", file=out)
    print(f"mean TPOT: {_ms(result.mean_tpot)} ms over {len(result.tpot_series)} tokens",
          file=out)
    for dev in spec.devices:
        print(f"disk read {dev.id}: {_mib(result.disk_bytes_read[dev.id])} MiB", file=out)
    if args.trace:
        payload = export_trace(result, args.trace_format)
        with open(args.trace, "wb") as fh:
            fh.write(payload)
        print(f"trace written to {args.trace} ({args.trace_format})", file=out)
    return 0


def _cmd_compare(args, out) -> int:
    spec = load_cluster_spec(args.config)
    rows = []
    for scheduler in _SCHEDULERS:
        used_spec, plan = _make_plan(spec, scheduler, scheduler == "halda")
        result = simulate(used_spec, plan, args.prompt_tokens, args.tokens)
        rows.append((scheduler, len([w for w in plan.w if w > 0]), plan.k,
                     plan.objective, result.mean_tpot, result.ttft))
    header = f"{'scheduler':<10} {'devices':>8} {'k':>3} {'model TPOT ms':>14} " \
             f"{'sim TPOT ms':>12} {'sim TTFT ms':>12}"
    print(header, file=out)
    print("-" * len(header), file=out)
    for name, ndev, k, model_tpot, sim_tpot, ttft in rows:
        print(f"{name:<10} {ndev:>8} {k:>3} {_ms(model_tpot):>14} "
              f"{_ms(sim_tpot):>12} {_ms(ttft):>12}", file=out)
    return 0


def _cmd_sweep_k(args, out) -> int:
    spec = load_cluster_spec(args.config)
    L = spec.model.layer_count
    M = len(spec.devices)
    print(f"{'k':>4} {'w per device':>13} {'sim TPOT ms':>12}", file=out)
    for k in halda.valid_factors(L):
        W = L // k
        if W % M:
            print(f"{k:>4} {'-':>13} {'(skipped: uneven windows)':>12}", file=out)
            continue
        w = (W // M,) * M
        n = (0,) * M
        from .latency import classify_devices
        sets = classify_devices(spec, w, n, k)
        plan = PartitionPlan(w, n, k, 0.0, sets)
        plan = PartitionPlan(w, n, k, evaluate_tpot(spec, plan), sets)
        result = simulate(spec, plan, args.prompt_tokens, args.tokens)
        print(f"{k:>4} {W // M:>13} {_ms(result.mean_tpot):>12}", file=out)
    return 0


def _cmd_validate(args, out) -> int:
    spec = load_cluster_spec(args.config)
    print(f"config OK: {len(spec.devices)} devices, model {spec.model.name!r} "
          f"with {spec.model.layer_count} layers", file=out)
    for d in spec.devices:
        print(f"  {d.id}: os={d.os} backend={d.backend} "
              f"ram={_mib(d.ram_available)} MiB", file=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ringplan",
        description="Plan and simulate pipelined-ring LLM inference on a home cluster")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="compute a layer-to-device plan")
    p.add_argument("--config", required=True)
    p.add_argument("--scheduler", choices=_SCHEDULERS, default="halda")
    p.add_argument("--no-select", action="store_true",
                   help="skip pruning of single-layer devices")
    p.add_argument("--out", help="write the plan to this file")

    p = sub.add_parser("simulate", help="replay a plan in the ring simulator")
    p.add_argument("--config", required=True)
    p.add_argument("--plan", help="plan file produced by `plan --out`")
    p.add_argument("--scheduler", choices=_SCHEDULERS, default="halda")
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--prompt-tokens", type=int, default=16)
    p.add_argument("--mode", choices=("pp", "prp"), default="prp")
    p.add_argument("--no-prefetch", action="store_true")
    p.add_argument("--trace", help="write the event timeline to this file")
    p.add_argument("--trace-format", choices=("csv", "trace-event"), default="csv")

    p = sub.add_parser("compare", help="planner vs heuristic baselines")
    p.add_argument("--config", required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--prompt-tokens", type=int, default=16)

    p = sub.add_parser("sweep-k", help="simulate even window splits per round count")
    p.add_argument("--config", required=True)
    p.add_argument("--tokens", type=int, required=True)
    p.add_argument("--prompt-tokens", type=int, default=16)

    p = sub.add_parser("validate", help="check a config file and exit")
    p.add_argument("--config", required=True)
    return parser


_HANDLERS = {
    "plan": ("planner", _cmd_plan),
    "simulate": ("simulator", _cmd_simulate),
    "compare": ("comparison", _cmd_compare),
    "sweep-k": ("sweep", _cmd_sweep_k),
    "validate": ("validation", _cmd_validate),
}


def run_cli(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    stage, handler = _HANDLERS[args.command]
    try:
        return handler(args, out)
    except ConfigError as exc:
        print(f"error: {stage}: invalid config:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 1
    except PlanningError as exc:
        print(f"error: {stage}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {stage}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
