"""Command-line front end: ``python3 -m crashlab <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import analysis, builder, campaign, injector, transforms, vm
from .kernels import resolve_kernel
from .mir import MirError, Module, format_instr, print_module, validate


def _load(path: str) -> Module:
    """Parse FILE, which may also name a bundled kernel."""
    spec = resolve_kernel(path)
    return spec.module()


def _inputs(path: str | None, target: str) -> dict:
    if path is not None:
        return vm.parse_inputs(Path(path).read_text())
    return resolve_kernel(target).reference_input()


def _decode(m: Module, res: vm.RunResult) -> list[str]:
    lines = []
    if res.ret is not None:
        f = m.function("main")
        kind = f.ret_kind if f is not None and f.ret_kind else "int64"
        lines.append(f"ret = {vm.from_bits(res.ret, kind)!r}")
    for name, cells in res.outputs.items():
        g = m.global_decl(name)
        kind = g.kind if g is not None else "int64"
        lines.append(f"{name} = [" + ", ".join(repr(vm.from_bits(c, kind)) for c in cells) + "]")
    return lines


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_validate(a) -> int:
    m = _load(a.file)
    problems = validate(m)
    for p in problems:
        print(p)
    if not problems:
        print(f"{a.file}: ok ({sum(len(list(f.instructions())) for f in m.functions)} instructions)")
    return 1 if problems else 0


def cmd_analyze(a) -> int:
    m = _load(a.file)
    every = not (a.liveness or a.loops or a.scev)
    for f in m.functions:
        print(f"function {f.name}")
        loops = analysis.find_loops(f)
        if a.loops or every:
            print("  loops (innermost first)")
            print(f"    {'header':<14}{'latch':<14}{'preheader':<14}{'depth':>5}  body")
            for lp in loops:
                print(f"    {lp.header:<14}{lp.latch or '-':<14}{lp.preheader or '-':<14}{lp.depth:>5}  "
                      + ",".join(sorted(lp.body)))
        if a.scev or every:
            print("  add-recurrences")
            defs, where = f.definitions(), f.block_of()
            for lp in loops:
                for ins in f.instructions():
                    if ins.result is None or where[ins.result] not in lp.body:
                        continue
                    rec = analysis.scev_analyze(ins.result, lp, f, defs)
                    if rec is not None:
                        addr = "addr" if analysis.is_used_in_addr_compute(ins.result, f) else "-"
                        print(f"    {lp.header:<14}%{ins.result:<14}{{{rec.init}, +, {rec.step}}}  "
                              f"{'phi' if rec.is_phi else 'derived'} {addr}")
        if a.liveness or every:
            lm = analysis.compute_liveness(f)
            print("  liveness")
            for ins in f.instructions():
                live = " ".join(sorted("%" + v for v in lm.live_in[ins.id]))
                print(f"    {ins.id:>4}  {format_instr(ins):<48} in: {live}")
    return 0


def cmd_transform(a) -> int:
    m = _load(a.file)
    out, reports = transforms.apply_passes(m, a.passes)
    _emit(print_module(out), a.output)
    dest = sys.stderr if not a.output else sys.stdout
    for r in reports:
        print("; " + r.format(), file=dest)
    return 0


def cmd_build_kernels(a) -> int:
    m = _load(a.file)
    if a.passes:
        m = transforms.apply_passes(m, a.passes)[0]
    bundle = builder.build_bundle(m)
    written = builder.write_bundle(bundle, a.output)
    print(f"{len(bundle.kernels)} kernels, {len(bundle.pairs)} IV pairs -> {a.output}: {', '.join(written)}")
    for func, iid, why in bundle.unsliceable:
        print(f"unsliceable {func}:{iid} {why.reason}", file=sys.stderr)
    return 1 if a.strict and bundle.unsliceable else 0


def cmd_run(a) -> int:
    m = _load(a.file)
    res = vm.run(m, _inputs(a.input, a.file), vm.RunConfig(step_budget=a.budget, trace=a.trace))
    if a.trace:
        for dyn, func, iid, value in res.trace:
            print(f"trace {dyn} {func}:{iid} {format_instr(m.function(func).instr(iid))} "
                  f"= {'-' if value is None else value}")
    print(f"status {res.status} dyn {res.dyn_count}")
    if res.trap is not None:
        t = res.trap
        print(f"trap {t.kind} at {t.function}:{t.block}:{t.pos} address "
              f"{'-' if t.address is None else hex(t.address)}")
    for line in _decode(m, res):
        print(line)
    return 0 if res.status == vm.COMPLETED else 2


def cmd_profile(a) -> int:
    m = _load(a.file)
    counts = vm.profile(m, _inputs(a.input, a.file))
    if a.format == "csv":
        print("function,instr,count,text")
        for (func, iid), c in sorted(counts.items()):
            text = format_instr(m.function(func).instr(iid)).replace('"', '""')
            print(f'{func},{iid},{c},"{text}"')
    else:
        for (func, iid), c in sorted(counts.items()):
            print(f"{func:<10}{iid:>5}{c:>10}  {format_instr(m.function(func).instr(iid))}")
    return 0


def cmd_inject(a) -> int:
    spec = resolve_kernel(a.file, a.input)
    m = campaign.mode_module(spec, a.mode) if a.mode != "raw" else spec.module()
    inputs = spec.reference_input()
    golden = vm.run(m, inputs, vm.RunConfig(record_accesses=True))
    plan = injector.InjectionPlan.parse(a.plan, a.function)
    hook = None
    if a.mode in ("care", "iterpro"):
        bundle = builder.build_bundle(m)
        from .runtime import RecoveryRuntime

        hook = RecoveryRuntime(lambda: bundle, iv_repair=a.mode == "iterpro", timing=a.timing)
    res = vm.run(m, inputs, vm.RunConfig(step_budget=a.budget or 10 * golden.dyn_count,
                                          injection=plan, recovery=hook))
    rec = injector.classify(res, golden, plan)
    if res.injection is None:
        print("warning: injection site never reached", file=sys.stderr)
    else:
        inj = res.injection
        print(f"injected {inj.function}:{inj.instr} occurrence {inj.occurrence} bit {inj.bit} "
              f"{inj.target} {inj.before:#x} -> {inj.after:#x} at dyn {inj.dyn_count}")
    for action in rec.actions:
        print("recovery " + action.log_line(rec.plan_id))
    print(",".join(campaign.CSV_COLUMNS))
    print(",".join(str(x) for x in rec.csv_row(a.timing)))
    return 0


def cmd_campaign(a) -> int:
    kernels = [resolve_kernel(t, a.input) for t in a.files] if a.files else None
    cfg = campaign.CampaignConfig(runs=a.runs, seed=a.seed, jobs=a.jobs, target=a.target,
                                  timing=a.timing)
    rep = campaign.run_campaign(kernels, a.mode, cfg)
    text = rep.to_csv() if a.format == "csv" else rep.summary()
    _emit(text, a.output)
    if a.csv:
        Path(a.csv).write_text(rep.to_csv())
    failed = [k for k in rep.kernels if k.error]
    for k in failed:
        print(f"kernel {k.kernel} failed: {k.error}", file=sys.stderr)
    return 1 if a.strict and failed else 0


def cmd_report_ivs(a) -> int:
    stats = campaign.report_iv_stats(a.kernels or None)
    sys.stdout.write(campaign.format_iv_stats(stats, a.format))
    return 0


# ---------------------------------------------------------------------------


GLOBAL_DEFAULTS = {"seed": 0, "jobs": 1, "format": "text", "strict": False}


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the subcommand.
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--format", choices=("csv", "text"))
    common.add_argument("--strict", action="store_true",
                        help="exit nonzero on any per-kernel build failure")

    p = argparse.ArgumentParser(prog="crashlab", parents=[common],
                                description="mini-IR crash recovery toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.set_defaults(func=fn)
        return s

    s = add("validate", cmd_validate, "parse and check a module")
    s.add_argument("file")

    s = add("analyze", cmd_analyze, "print liveness, loops or add-recurrences")
    s.add_argument("file")
    for flag in ("--liveness", "--loops", "--scev"):
        s.add_argument(flag, action="store_true", default=False)

    s = add("transform", cmd_transform, "apply passes (sr, unroll:N, icp, mck)")
    s.add_argument("file")
    s.add_argument("--passes", required=True)
    s.add_argument("-o", "--output", default=None)

    s = add("build-kernels", cmd_build_kernels, "emit the recovery table and kernels")
    s.add_argument("file")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--passes", default="")

    s = add("run", cmd_run, "execute a module")
    s.add_argument("file")
    s.add_argument("--input", default=None)
    s.add_argument("--trace", action="store_true", default=False)
    s.add_argument("--budget", type=int, default=vm.RunConfig().step_budget)

    s = add("profile", cmd_profile, "per-instruction execution counts")
    s.add_argument("file")
    s.add_argument("--input", default=None)

    s = add("inject", cmd_inject, "run a single injection plan I,n,bit")
    s.add_argument("file")
    s.add_argument("--plan", required=True)
    s.add_argument("--input", default=None)
    s.add_argument("--function", default="main")
    s.add_argument("--mode", choices=("raw",) + campaign.MODES, default="raw",
                   help="raw runs FILE untransformed; other modes prepare it as a campaign would")
    s.add_argument("--budget", type=int, default=0)
    s.add_argument("--timing", action="store_true", default=False)

    s = add("campaign", cmd_campaign, "seeded fault-injection campaign")
    s.add_argument("files", nargs="*", help="kernel names or .mir files (default: all bundled)")
    s.add_argument("--runs", type=int, default=campaign.DEFAULT_RUNS)
    s.add_argument("--mode", choices=campaign.MODES, default="none")
    s.add_argument("--target", choices=("all", "addr"), default="all")
    s.add_argument("--input", default=None)
    s.add_argument("--timing", action="store_true", default=False)
    s.add_argument("--csv", default=None, help="also write the per-run CSV here")
    s.add_argument("-o", "--output", default=None)

    s = add("report-ivs", cmd_report_ivs, "recoverable IVs before and after transforms")
    s.add_argument("kernels", nargs="*")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    for name, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, value)
    try:
        return args.func(args)
    except (MirError, transforms.TransformError, builder.BuildError, KeyError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
