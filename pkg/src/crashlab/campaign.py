"""Fault-injection campaigns over the bundled kernels and their reports."""

from __future__ import annotations

import csv
import io
import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .analysis import find_loops, is_used_in_addr_compute, loop_phis, scev_analyze
from .builder import RecoveryBundle, build_bundle, count_recoverable_ivs
from .injector import (
    BUCKETS, CLASSES, CRASH, SDC, InjectionPlan, OutcomeRecord, classify, injectable, sample_plan,
)
from .kernels import FileKernel, KernelSpec, get_kernel, kernel_names
from .mir import Module
from .runtime import ABORTED, RecoveryRuntime
from .transforms import apply_passes
from .vm import COMPLETED, INVALID_ACCESS, RunConfig, run

MODES = ("none", "care", "iterpro")
CSV_COLUMNS = ("plan_id", "instr", "occurrence", "bit", "class", "trap", "latency", "bucket",
               "recovered", "recovery_ms")
CI_RUNS = 500
DEFAULT_RUNS = 5000


@dataclass
class CampaignConfig:
    runs: int = CI_RUNS
    seed: int = 0
    jobs: int = 1
    budget_factor: int = 10
    target: str = "all"  # all | addr: restrict sampling to address-feeding instructions
    timing: bool = False


def protected_passes(spec: KernelSpec) -> str:
    return ",".join(p for p in (spec.baseline, "icp", "mck") if p)


def mode_module(spec: KernelSpec, mode: str) -> Module:
    """Module a campaign runs: baseline passes for ``care``, plus icp/mck otherwise."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    passes = spec.baseline if mode == "care" else protected_passes(spec)
    return apply_passes(spec.module(), passes)[0]


def addr_feeding(m: Module) -> set[tuple[str, int]]:
    out = set()
    for f in m.functions:
        for ins in f.instructions():
            if ins.opcode == "addr" or (ins.result is not None and is_used_in_addr_compute(ins.result, f)):
                out.add((f.name, ins.id))
    return out


def iv_instructions(m: Module) -> set[tuple[str, int]]:
    """Header phis that are induction variables, and their in-loop updates."""
    out = set()
    for f in m.functions:
        defs = f.definitions()
        for lp in find_loops(f):
            for phi in loop_phis(lp, f):
                if scev_analyze(phi.result, lp, f, defs) is None:
                    continue
                out.add((f.name, phi.id))
                for op, lab in phi.incoming():
                    if lab in lp.body and hasattr(op, "name") and op.name in defs:
                        out.add((f.name, defs[op.name].id))
    return out


@dataclass
class KernelContext:
    """Everything needed to run one plan; built once per kernel and mode."""

    name: str
    mode: str
    module: Module
    inputs: dict
    golden: object
    profile: dict
    budget: int
    bundle: RecoveryBundle | None
    timing: bool

    def run_plan(self, plan: InjectionPlan, plan_id: int) -> OutcomeRecord:
        hook = None
        if self.mode != "none":
            bundle = self.bundle
            hook = RecoveryRuntime(lambda: bundle, iv_repair=self.mode == "iterpro", timing=self.timing)
        res = run(self.module, self.inputs, RunConfig(step_budget=self.budget, injection=plan,
                                                      recovery=hook))
        rec = classify(res, self.golden, plan, plan_id)
        rec.recovery_induced_sdc = _recovery_induced_sdc(rec, self.golden)
        return rec


def _recovery_induced_sdc(rec: OutcomeRecord, golden) -> bool:
    """An SDC whose recovery steered an access somewhere the golden run did not go.

    Patches are compared with the golden address of the same dynamic access.
    When the golden run never executed that access occurrence, the fault had
    already changed the control flow before recovery, so the corruption is
    attributed to the fault.
    """
    if rec.cls != SDC:
        return False
    for a in rec.actions:
        if a.decision == ABORTED or a.site is None:
            continue
        want = golden.accesses.get(a.site)
        if want is not None and want != a.address:
            return True
    return False


def make_context(spec: KernelSpec, mode: str, cfg: CampaignConfig) -> KernelContext:
    m = mode_module(spec, mode)
    inputs = spec.reference_input()
    golden = run(m, inputs, RunConfig(record_accesses=True))
    if golden.status != COMPLETED:
        raise RuntimeError(f"golden run of {spec.name} did not complete: {golden.status}")
    allowed = injectable(m)
    if cfg.target == "addr":
        allowed &= addr_feeding(m)
    profile = {k: c for k, c in golden.counts.items() if k in allowed and c > 0}
    bundle = build_bundle(m) if mode != "none" else None
    return KernelContext(spec.name, mode, m, inputs, golden, profile,
                         cfg.budget_factor * golden.dyn_count, bundle, cfg.timing)


def make_plans(profile: dict, runs: int, seed: int) -> list[InjectionPlan]:
    """Plans drawn serially; each carries its own seed so it can be replayed alone."""
    master = random.Random(seed)
    plans = []
    for _ in range(runs):
        s = master.getrandbits(63)
        plans.append(sample_plan(profile, random.Random(s), seed=s))
    return plans


_WORKER: dict = {}


def _worker_batch(args):
    spec, mode, cfg, batch = args
    key = (spec, mode, cfg.target, cfg.timing, cfg.budget_factor)
    if key not in _WORKER:
        _WORKER.clear()
        _WORKER[key] = make_context(spec, mode, cfg)
    ctx = _WORKER[key]
    return [ctx.run_plan(plan, pid) for pid, plan in batch]


@dataclass
class KernelReport:
    kernel: str
    mode: str
    runs: int = 0
    outcomes: Counter = field(default_factory=Counter)
    traps: Counter = field(default_factory=Counter)  # kind of the first trap of each run
    buckets: Counter = field(default_factory=Counter)  # latency of unrecovered crashes
    manifest_buckets: Counter = field(default_factory=Counter)  # latency of every first trap
    crash_incidence: int = 0  # runs with at least one trap, before recovery
    invalid_access: int = 0
    recovered: int = 0
    iv_invalid_access: int = 0
    iv_recovered: int = 0
    recovery_induced_sdc: int = 0
    aborts: Counter = field(default_factory=Counter)
    recovery_ms: list = field(default_factory=list)
    iv_before: tuple = (0, 0)
    iv_after: tuple = (0, 0)
    records: list = field(default_factory=list)
    error: str = ""

    @property
    def recovery_rate(self) -> float | None:
        if self.mode == "none":
            return None
        return self.recovered / self.invalid_access if self.invalid_access else 0.0

    @property
    def iv_recovery_rate(self) -> float | None:
        if self.mode == "none":
            return None
        return self.iv_recovered / self.iv_invalid_access if self.iv_invalid_access else 0.0


def run_kernel_campaign(spec: KernelSpec | FileKernel, mode: str, cfg: CampaignConfig) -> KernelReport:
    rep = KernelReport(spec.name, mode)
    try:
        ctx = make_context(spec, mode, cfg)
    except Exception as exc:  # reported per kernel, the campaign goes on
        rep.error = f"{type(exc).__name__}: {exc}"
        return rep
    plans = list(enumerate(make_plans(ctx.profile, cfg.runs, cfg.seed)))
    if cfg.jobs > 1 and len(plans) > 1:
        size = max(1, len(plans) // (cfg.jobs * 4))
        batches = [(spec, mode, cfg, plans[i:i + size]) for i in range(0, len(plans), size)]
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            records = [r for chunk in ex.map(_worker_batch, batches) for r in chunk]
    else:
        records = [ctx.run_plan(plan, pid) for pid, plan in plans]
    records.sort(key=lambda r: r.plan_id)
    ivs = iv_instructions(ctx.module)
    base = spec.module()
    rep.iv_before = count_recoverable_ivs(base)
    rep.iv_after = count_recoverable_ivs(apply_passes(base, protected_passes(spec))[0])
    for r in records:
        rep.runs += 1
        rep.outcomes[r.cls] += 1
        if r.first_trap:
            rep.crash_incidence += 1
            rep.traps[r.first_trap] += 1
            if r.bucket:
                rep.manifest_buckets[r.bucket] += 1
        if r.cls == CRASH and r.bucket:
            rep.buckets[r.bucket] += 1
        if r.first_trap == INVALID_ACCESS:
            rep.invalid_access += 1
            rep.recovered += r.recovered
            if (r.plan.function, r.plan.instruction) in ivs:
                rep.iv_invalid_access += 1
                rep.iv_recovered += r.recovered
        for a in r.actions:
            if a.decision == ABORTED:
                rep.aborts[a.reason.split(":")[0]] += 1
        if r.recovery_ms is not None:
            rep.recovery_ms.append(r.recovery_ms)
        rep.recovery_induced_sdc += getattr(r, "recovery_induced_sdc", False)
    rep.records = records
    return rep


@dataclass
class CampaignReport:
    mode: str
    config: CampaignConfig
    kernels: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        multi = len(self.kernels) > 1
        w.writerow((["kernel"] if multi else []) + list(CSV_COLUMNS))
        for k in self.kernels:
            for r in k.records:
                w.writerow(([k.kernel] if multi else []) + r.csv_row(self.config.timing))
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"mode={self.mode} runs/kernel={self.config.runs} seed={self.config.seed} "
                 f"target={self.config.target} granularity=IR-instruction"]
        head = f"{'kernel':<15}" + "".join(f"{c:>8}" for c in CLASSES) + \
            "".join(f"{b:>8}" for b in BUCKETS) + f"{'InvAcc':>8}{'Misal*':>8}{'Arith*':>8}"
        if self.mode != "none":
            head += f"{'recov':>8}{'rate':>8}{'IVrate':>8}{'rSDC':>6}"
        lines.append(head)
        for k in self.kernels:
            if k.error:
                lines.append(f"{k.kernel:<15} ERROR {k.error}")
                continue
            row = f"{k.kernel:<15}" + "".join(f"{k.outcomes[c]:>8}" for c in CLASSES)
            row += "".join(f"{k.buckets[b]:>8}" for b in BUCKETS)
            row += f"{k.traps['InvalidAccess']:>8}{k.traps['Misaligned']:>8}{k.traps['ArithFault']:>8}"
            if self.mode != "none":
                row += f"{k.recovered:>8}{k.recovery_rate:>8.3f}{k.iv_recovery_rate:>8.3f}" \
                       f"{k.recovery_induced_sdc:>6}"
            lines.append(row)
        lines.append("* Misaligned and ArithFault approximate SIGBUS and other signals.")
        return "\n".join(lines) + "\n"


def run_campaign(kernels: list | None, mode: str, cfg: CampaignConfig) -> CampaignReport:
    """Run ``mode`` over kernel names or specs (all bundled kernels by default)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    report = CampaignReport(mode, cfg)
    for k in kernels or kernel_names():
        spec = get_kernel(k) if isinstance(k, str) else k
        report.kernels.append(run_kernel_campaign(spec, mode, cfg))
    return report


# ---------------------------------------------------------------------------
# recoverable induction variables


@dataclass
class IVStats:
    kernel: str
    loops: int
    before: int
    after: int

    @property
    def improvement(self) -> str:
        if self.before == 0:
            return "new" if self.after > 0 else "0%"
        return f"{100.0 * (self.after - self.before) / self.before:.0f}%"


def report_iv_stats(names: list[str] | None = None) -> list[IVStats]:
    """Recoverable IVs of the raw kernel source vs. after baseline+icp+mck."""
    out = []
    for name in names or kernel_names():
        spec = get_kernel(name)
        m = spec.module()
        loops, before = count_recoverable_ivs(m)
        tloops, after = count_recoverable_ivs(apply_passes(m, protected_passes(spec))[0])
        out.append(IVStats(name, tloops, before, after))
    return out


def format_iv_stats(stats: list[IVStats], fmt: str = "text") -> str:
    if fmt == "csv":
        rows = ["kernel,loops,original,transformed,improvement"]
        rows += [f"{s.kernel},{s.loops},{s.before},{s.after},{s.improvement}" for s in stats]
        return "\n".join(rows) + "\n"
    rows = [f"{'kernel':<15}{'loops':>6}{'original':>10}{'transformed':>13}{'improvement':>13}"]
    rows += [f"{s.kernel:<15}{s.loops:>6}{s.before:>10}{s.after:>13}{s.improvement:>13}" for s in stats]
    return "\n".join(rows) + "\n"
