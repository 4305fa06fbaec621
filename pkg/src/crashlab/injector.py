"""Single-bit-flip fault injection and outcome classification."""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass, field

from .mir import Module
from .vm import COMPLETED, HANG, INVALID_ACCESS, MASK64, TRAPPED, RunResult

BENIGN, CRASH, SDC, HANG_CLASS = "Benign", "Crash", "SDC", "Hang"
CLASSES = (BENIGN, CRASH, SDC, HANG_CLASS)
BUCKETS = ("<=10", "11-50", "51-400", ">400")


@dataclass(frozen=True)
class InjectionPlan:
    """Flip ``bit`` of the destination of ``instruction`` after its ``occurrence``-th execution."""

    instruction: int
    occurrence: int
    bit: int
    seed: int | None = None
    function: str = "main"

    def __post_init__(self):
        if not 0 <= self.bit < 64:
            raise ValueError(f"bit {self.bit} out of range 0..63")
        if self.occurrence < 1:
            raise ValueError("occurrence is 1-based")

    @classmethod
    def parse(cls, text: str, function: str = "main") -> "InjectionPlan":
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"plan must be I,n,bit; got {text!r}")
        i, n, b = (int(p) for p in parts)
        return cls(i, n, b, function=function)


def flip_bit(payload: int, bit: int) -> int:
    if not 0 <= bit < 64:
        raise ValueError(f"bit {bit} out of range 0..63")
    return (payload ^ (1 << bit)) & MASK64


def injectable(m: Module) -> set[tuple[str, int]]:
    """Instructions with a destination: a result value, or the memory cell a store writes."""
    return {(f.name, i.id) for f in m.functions for i in f.instructions()
            if i.result is not None or i.opcode == "store"}


def sample_plan(profile: dict, rng: random.Random, seed: int | None = None) -> InjectionPlan:
    """Pick (I, n, bit) with P(I) proportional to its execution count.

    ``profile`` maps an instruction id, or a ``(function, id)`` pair, to its
    dynamic count; zero-count entries are never chosen.
    """
    items = sorted(((k if isinstance(k, tuple) else ("main", k)), c) for k, c in profile.items() if c > 0)
    if not items:
        raise ValueError("empty profile")
    cum = []
    total = 0
    for _, c in items:
        total += c
        cum.append(total)
    r = rng.randrange(total)
    (func, iid), count = items[bisect.bisect_right(cum, r)]
    occurrence = rng.randint(1, count)
    bit = rng.randrange(64)
    return InjectionPlan(iid, occurrence, bit, seed, func)


def latency_bucket(latency: int | None) -> str:
    if latency is None:
        return ""
    if latency <= 10:
        return BUCKETS[0]
    if latency <= 50:
        return BUCKETS[1]
    if latency <= 400:
        return BUCKETS[2]
    return BUCKETS[3]


@dataclass
class OutcomeRecord:
    plan: InjectionPlan
    cls: str
    plan_id: int = 0
    trap: str = ""  # kind of the final, unrecovered trap
    first_trap: str = ""  # kind of the first trap, recovered or not
    latency: int | None = None  # injection -> first trap, dynamic instructions
    bucket: str = ""
    recovery_attempted: bool = False
    recovered: bool = False
    recovery_ms: float | None = None
    actions: list = field(default_factory=list)
    injected: bool = True

    def csv_row(self, timing: bool = False) -> list:
        return [self.plan_id, self.plan.instruction, self.plan.occurrence, self.plan.bit, self.cls,
                self.trap, "" if self.latency is None else self.latency, self.bucket,
                int(self.recovered),
                f"{self.recovery_ms:.3f}" if timing and self.recovery_ms is not None else ""]


def classify(run: RunResult, golden: RunResult, plan: InjectionPlan | None = None,
             plan_id: int = 0) -> OutcomeRecord:
    """Map a faulty run to Benign / Crash / SDC / Hang against the golden run.

    A run whose traps were all recovered is classified by its output; the
    ``recovered`` flag records that recovery happened.
    """
    if golden.status != COMPLETED:
        raise ValueError("golden run did not complete")
    plan = plan or InjectionPlan(0, 1, 0)
    rec = OutcomeRecord(plan, BENIGN, plan_id, injected=run.injection is not None)
    if run.status == HANG:
        rec.cls = HANG_CLASS
    elif run.status == TRAPPED:
        rec.cls = CRASH
        rec.trap = run.trap.kind
    elif run.same_output(golden):
        rec.cls = BENIGN
    else:
        rec.cls = SDC
    if run.traps:
        first = run.traps[0]
        rec.first_trap = first.kind
        if run.injection is not None:
            rec.latency = first.dyn_count - run.injection.dyn_count
            rec.bucket = latency_bucket(rec.latency)
    rec.actions = list(run.recoveries)
    rec.recovery_attempted = bool(run.recoveries)
    rec.recovered = run.status == COMPLETED and any(t.kind == INVALID_ACCESS for t in run.traps)
    if run.recoveries:
        times = [a.elapsed for a in run.recoveries if a.elapsed is not None]
        rec.recovery_ms = 1000.0 * sum(times) if times else None
    return rec
