"""Deterministic interpreter for the mini IR with a sparse simulated address space.

Globals are laid out in disjoint regions separated by large unmapped gaps, so a
bit flip in a high address bit lands outside every region (an InvalidAccess
trap, the SIGSEGV analog) while a flip in a low bit may stay in-bounds.
"""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

from .analysis import LivenessMap
from .mir import Function, Global, Imm, Instr, Module, Var

MASK64 = (1 << 64) - 1
ELEM_SIZE = 8
GLOBAL_BASE = 0x1000_0000
GLOBAL_STRIDE = 1 << 24
STACK_BASE = 0x7FF0_0000_0000
SLOT_STRIDE = 1 << 12
DEFAULT_BUDGET = 50_000_000

COMPLETED = "Completed"
TRAPPED = "Trapped"
HANG = "HangBudgetExceeded"

INVALID_ACCESS = "InvalidAccess"
MISALIGNED = "Misaligned"
ARITH_FAULT = "ArithFault"


def wrap_int(x: int) -> int:
    x &= MASK64
    return x - (1 << 64) if x >> 63 else x


def to_bits(value, kind: str) -> int:
    """64-bit payload of a runtime value."""
    if kind == "float64":
        return struct.unpack("<Q", struct.pack("<d", float(value)))[0]
    return int(value) & MASK64


def from_bits(bits: int, kind: str):
    bits &= MASK64
    if kind == "float64":
        return struct.unpack("<d", struct.pack("<Q", bits))[0]
    if kind == "int64":
        return wrap_int(bits)
    return bits


def coerce(value, kind: str):
    if kind == "float64":
        return float(value)
    if kind == "int64":
        return wrap_int(int(value))
    return int(value) & MASK64


class VMTrap(Exception):
    def __init__(self, kind: str, address: int | None = None):
        super().__init__(kind)
        self.kind = kind
        self.address = address


@dataclass
class Region:
    name: str
    base: int
    count: int
    kind: str | None
    data: list

    @property
    def end(self) -> int:
        return self.base + self.count * ELEM_SIZE


class Memory:
    """Sparse address space of disjoint, aligned regions."""

    def __init__(self) -> None:
        self.regions: list[Region] = []
        self._bases: list[int] = []

    def map(self, region: Region) -> Region:
        if region.base % ELEM_SIZE:
            raise ValueError("region base must be aligned")
        i = bisect.bisect_left(self._bases, region.base)
        if (i > 0 and self.regions[i - 1].end > region.base) or (
            i < len(self.regions) and region.end > self.regions[i].base
        ):
            raise ValueError(f"region {region.name} overlaps an existing mapping")
        self.regions.insert(i, region)
        self._bases.insert(i, region.base)
        return region

    def find(self, address: int) -> Region | None:
        i = bisect.bisect_right(self._bases, address) - 1
        if i >= 0 and address < self.regions[i].end:
            return self.regions[i]
        return None

    def locate(self, address: int) -> tuple[Region, int]:
        r = self.find(address)
        if r is None:
            raise VMTrap(INVALID_ACCESS, address)
        off = address - r.base
        if off % ELEM_SIZE:
            raise VMTrap(MISALIGNED, address)
        return r, off // ELEM_SIZE

    def read(self, address: int, kind: str):
        r, idx = self.locate(address)
        v = r.data[idx]
        rk = r.kind or _native_kind(v)
        return v if rk == kind else from_bits(to_bits(v, rk), kind)

    def write(self, address: int, value, kind: str) -> None:
        r, idx = self.locate(address)
        if r.kind is None or r.kind == kind:
            r.data[idx] = value
        else:
            r.data[idx] = from_bits(to_bits(value, kind), r.kind)


def _native_kind(v) -> str:
    return "float64" if isinstance(v, float) else "int64"


@dataclass
class TrapRecord:
    kind: str
    function: str
    block: str
    pos: int
    instr: int
    address: int | None
    dyn_count: int

    @property
    def pc(self) -> tuple[str, str, int]:
        return (self.function, self.block, self.pos)


@dataclass
class InjectionRecord:
    dyn_count: int
    function: str
    instr: int
    occurrence: int
    bit: int
    target: str  # value name, or "mem" for a store's memory cell
    before: int
    after: int


@dataclass
class RunResult:
    status: str
    trap: TrapRecord | None
    ret: int | None  # bit payload of main's return value
    outputs: dict
    dyn_count: int
    trace: list | None = None
    injection: InjectionRecord | None = None
    traps: list = field(default_factory=list)
    recoveries: list = field(default_factory=list)
    accesses: dict | None = None
    counts: dict | None = None

    def same_output(self, other: "RunResult") -> bool:
        return self.ret == other.ret and self.outputs == other.outputs


@dataclass
class RunConfig:
    step_budget: int = DEFAULT_BUDGET
    trace: bool = False
    injection: object | None = None  # InjectionPlan-like: function, instruction, occurrence, bit
    recovery: object | None = None  # has on_trap(trap, state) -> bool
    on_access: Callable | None = None  # (state, instr, address, occurrence)
    record_accesses: bool = False


@dataclass
class Frame:
    function: Function
    env: dict
    block: str
    pos: int
    slots: dict = field(default_factory=dict)
    ret_to: Instr | None = None


class MachineState:
    """Everything a run mutates: frames, memory, counters."""

    def __init__(self, module: Module):
        self.module = module
        self.memory = Memory()
        self.frames: list[Frame] = []
        self.dyn_count = 0
        self.counts: dict[tuple[str, int], int] = {}
        self.global_bases: dict[str, int] = {}
        self._next_slot = STACK_BASE

    @property
    def frame(self) -> Frame:
        return self.frames[-1]

    @property
    def value_env(self) -> dict:
        return self.frames[-1].env

    @property
    def stack_slots(self) -> dict:
        return self.frames[-1].slots

    @property
    def pc(self) -> tuple[str, str, int]:
        fr = self.frames[-1]
        return (fr.function.name, fr.block, fr.pos)

    def new_slot(self, name: str) -> int:
        base = self._next_slot
        self._next_slot += SLOT_STRIDE
        self.memory.map(Region(f"slot:{name}", base, 1, None, [0]))
        return base


# ---------------------------------------------------------------------------
# Inputs


def parse_inputs(text: str) -> dict:
    """``name = [v, v, ...]`` or ``name = v`` bindings, one per line; ``;``/``#`` comments."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split(";")[0].split("#")[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'name = value'")
        name, rhs = (s.strip() for s in line.split("=", 1))
        if rhs.startswith("["):
            if not rhs.endswith("]"):
                raise ValueError(f"line {lineno}: unterminated list")
            items = [s.strip() for s in rhs[1:-1].split(",") if s.strip()]
            out[name] = [_literal(s) for s in items]
        else:
            out[name] = _literal(rhs)
    return out


def _literal(s: str):
    try:
        return int(s, 0)
    except ValueError:
        return float(s)


def format_inputs(inputs: dict) -> str:
    lines = []
    for name, v in inputs.items():
        if isinstance(v, (list, tuple)):
            lines.append(f"{name} = [" + ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v) + "]")
        else:
            lines.append(f"{name} = {v!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Interpreter


def _idiv(a: int, b: int) -> int:
    if b == 0 or (a == -(1 << 63) and b == -1):
        raise VMTrap(ARITH_FAULT)
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def _cmp(pred: str, a, b) -> int:
    if pred == "eq":
        return int(a == b)
    if pred == "ne":
        return int(a != b)
    if pred == "lt":
        return int(a < b)
    if pred == "le":
        return int(a <= b)
    if pred == "gt":
        return int(a > b)
    return int(a >= b)


class VM:
    def __init__(self, module: Module, inputs: dict, cfg: RunConfig | None = None,
                 entry: str = "main", args: list | None = None):
        self.module = module
        self.entry = entry
        self._blocks = {f.name: {b.label: b for b in f.blocks} for f in module.functions}
        self.cfg = cfg or RunConfig()
        self.state = MachineState(module)
        self.trace: list | None = [] if self.cfg.trace else None
        self.injection: InjectionRecord | None = None
        self.traps: list[TrapRecord] = []
        # a recovery hook exposing ``log`` shares it with the run result
        self.recoveries: list = getattr(self.cfg.recovery, "log", [])
        self.accesses: dict | None = {} if self.cfg.record_accesses else None
        self._plan = self.cfg.injection
        self._layout(inputs, args)

    def _layout(self, inputs: dict, args: list | None) -> None:
        st = self.state
        for n, g in enumerate(self.module.globals):
            base = GLOBAL_BASE + n * GLOBAL_STRIDE
            init = inputs.get(g.name, [])
            if not isinstance(init, (list, tuple)):
                init = [init]
            if len(init) > g.count:
                raise ValueError(f"input for @{g.name} has {len(init)} elements, declared {g.count}")
            data = [coerce(v, g.kind) for v in init] + [coerce(0, g.kind)] * (g.count - len(init))
            st.memory.map(Region(g.name, base, g.count, g.kind, data))
            st.global_bases[g.name] = base
        main = self.module.function(self.entry)
        env = {}
        if args is not None:
            if len(args) != len(main.params):
                raise ValueError(f"{main.name} takes {len(main.params)} arguments, got {len(args)}")
            for (p, kind), v in zip(main.params, args):
                env[p] = coerce(v, kind)
        for p, kind in main.params if args is None else ():
            if p not in inputs:
                raise ValueError(f"missing input for parameter %{p}")
            env[p] = coerce(inputs[p], kind)
        st.frames.append(Frame(main, env, main.entry, 0))

    # -- operands -----------------------------------------------------------

    def _ev(self, op, env):
        if isinstance(op, Var):
            return env[op.name]
        if isinstance(op, Imm):
            return op.value
        return self.state.global_bases[op.name]

    # -- main loop ----------------------------------------------------------

    def run(self) -> RunResult:
        st = self.state
        budget = self.cfg.step_budget
        retval = None
        try:
            while True:
                fr = st.frames[-1]
                block = self._blocks[fr.function.name][fr.block]
                ins = block.instrs[fr.pos]
                st.dyn_count += 1
                if st.dyn_count > budget:
                    return self._result(HANG, None)
                try:
                    outcome = self._step(fr, ins)
                except VMTrap as t:
                    trap = TrapRecord(t.kind, fr.function.name, fr.block, fr.pos, ins.id, t.address, st.dyn_count)
                    self.traps.append(trap)
                    hook = self.cfg.recovery
                    if t.kind == INVALID_ACCESS and hook is not None and hook.on_trap(trap, st):
                        st.dyn_count -= 1  # the retried instruction is counted once
                        continue
                    return self._result(TRAPPED, trap)
                if outcome is _RETURN:
                    retval = self._retval
                    break
        except RecursionError:  # pragma: no cover - guard for pathological inputs
            return self._result(HANG, None)
        main = self.module.function(self.entry)
        ret = None if retval is None else to_bits(retval, main.ret_kind or _native_kind(retval))
        return self._result(COMPLETED, None, ret)

    def _result(self, status: str, trap: TrapRecord | None, ret: int | None = None) -> RunResult:
        st = self.state
        names = self.module.outputs or [g.name for g in self.module.globals]
        outputs = {}
        for name in names:
            g = self.module.global_decl(name)
            r = st.memory.find(st.global_bases[name])
            outputs[name] = tuple(to_bits(v, g.kind) for v in r.data)
        return RunResult(status, trap, ret, outputs, st.dyn_count, self.trace, self.injection,
                         self.traps, self.recoveries, self.accesses, dict(st.counts))

    def _retire(self, fr: Frame, ins: Instr, value=None, address: int | None = None) -> None:
        st = self.state
        key = (fr.function.name, ins.id)
        n = st.counts.get(key, 0) + 1
        st.counts[key] = n
        plan = self._plan
        if plan is not None and plan.instruction == ins.id and plan.occurrence == n \
                and getattr(plan, "function", "main") == fr.function.name:
            self._inject(fr, ins, n, address)
            self._plan = None
            if ins.result is not None:
                value = fr.env[ins.result]
        if self.trace is not None:
            self.trace.append((st.dyn_count, fr.function.name, ins.id,
                               value if ins.result is not None else address))

    def _inject(self, fr: Frame, ins: Instr, n: int, address: int | None) -> None:
        bit = self._plan.bit
        if ins.result is not None:
            old = fr.env[ins.result]
            before = to_bits(old, ins.kind)
            after = before ^ (1 << bit)
            fr.env[ins.result] = from_bits(after, ins.kind)
            target = ins.result
        else:
            # store: flip the memory cell just written
            r, idx = self.state.memory.locate(address)
            kind = r.kind or _native_kind(r.data[idx])
            before = to_bits(r.data[idx], kind)
            after = before ^ (1 << bit)
            r.data[idx] = from_bits(after, kind)
            target = "mem"
        self.injection = InjectionRecord(self.state.dyn_count, fr.function.name, ins.id, n, bit,
                                         target, before, after)

    def _access(self, fr: Frame, ins: Instr, address: int) -> None:
        st = self.state
        occ = st.counts.get((fr.function.name, ins.id), 0) + 1
        if self.accesses is not None:
            self.accesses[(fr.function.name, ins.id, occ)] = address
        if self.cfg.on_access is not None:
            self.cfg.on_access(st, ins, address, occ)

    _retval = None

    def _step(self, fr: Frame, ins: Instr):
        env = fr.env
        op = ins.opcode
        ev = self._ev
        if op in ("add", "sub", "mul", "div", "shl"):
            a = ev(ins.operands[0], env)
            b = ev(ins.operands[1], env)
            kind = ins.kind
            if kind == "float64":
                a, b = float(a), float(b)
                if op == "add":
                    r = a + b
                elif op == "sub":
                    r = a - b
                elif op == "mul":
                    r = a * b
                else:
                    if b == 0.0:
                        raise VMTrap(ARITH_FAULT)
                    r = a / b
            else:
                if op == "add":
                    r = a + b
                elif op == "sub":
                    r = a - b
                elif op == "mul":
                    r = a * b
                elif op == "div":
                    r = _idiv(wrap_int(a), wrap_int(b))
                else:
                    r = a << (b & 63)
                r = r & MASK64 if kind == "address" else wrap_int(r)
            env[ins.result] = r
        elif op == "addr":
            base, idx, scale, off = (ev(o, env) for o in ins.operands)
            env[ins.result] = (base + idx * scale + off) & MASK64
        elif op == "load":
            p = ev(ins.operands[0], env)
            self._access(fr, ins, p)
            env[ins.result] = self.state.memory.read(p, ins.kind)
        elif op == "store":
            v = ev(ins.operands[0], env)
            p = ev(ins.operands[1], env)
            self._access(fr, ins, p)
            vk = _operand_kind(ins.operands[0], fr.function, v)
            self.state.memory.write(p, v, vk)
            fr.pos += 1
            self._retire(fr, ins, address=p)
            return None
        elif op == "icmp":
            a = ev(ins.operands[0], env)
            b = ev(ins.operands[1], env)
            env[ins.result] = _cmp(ins.pred, a, b)
        elif op == "const":
            env[ins.result] = ins.operands[0].value if ins.kind != "float64" else float(ins.operands[0].value)
        elif op == "alloc":
            slot = fr.slots.get(ins.result)
            if slot is None:
                slot = fr.slots[ins.result] = self.state.new_slot(ins.result)
            env[ins.result] = slot
        elif op == "br":
            self._retire(fr, ins)
            self._goto(fr, ins.labels[0])
            return None
        elif op == "condbr":
            c = ev(ins.operands[0], env)
            self._retire(fr, ins)
            self._goto(fr, ins.labels[0] if c != 0 else ins.labels[1])
            return None
        elif op == "ret":
            v = ev(ins.operands[0], env) if ins.operands else None
            self._retire(fr, ins)
            return self._return(v)
        elif op == "call":
            args = [ev(o, env) for o in ins.operands]
            if ins.callee == "sqrt":
                x = float(args[0])
                env[ins.result] = math.sqrt(x) if x >= 0 else math.nan
            elif ins.callee == "fabs":
                env[ins.result] = math.fabs(float(args[0]))
            else:
                callee = self.module.function(ins.callee)
                cenv = {p: coerce(a, k) for (p, k), a in zip(callee.params, args)}
                self.state.frames.append(Frame(callee, cenv, callee.entry, 0, ret_to=ins))
                return None
        elif op == "phi":  # pragma: no cover - phis are executed by _goto
            raise AssertionError("phi reached in straight-line execution")
        fr.pos += 1
        self._retire(fr, ins, env.get(ins.result) if ins.result is not None else None)
        return None

    def _goto(self, fr: Frame, target: str) -> None:
        pred = fr.block
        block = self._blocks[fr.function.name][target]
        phis = block.phis()
        fr.block = target
        fr.pos = 0
        if not phis:
            return
        env = fr.env
        vals = []
        for phi in phis:
            for op, lab in zip(phi.operands, phi.labels):
                if lab == pred:
                    v = self._ev(op, env)
                    vals.append(coerce(v, phi.kind) if isinstance(op, Imm) else v)
                    break
            else:  # pragma: no cover - validated IR cannot reach this
                raise AssertionError(f"phi %{phi.result} has no incoming value from {pred}")
        st = self.state
        for n, (phi, v) in enumerate(zip(phis, vals)):
            st.dyn_count += 1
            env[phi.result] = v
            fr.pos = n + 1
            self._retire(fr, phi, v)

    def _return(self, v):
        st = self.state
        fr = st.frames.pop()
        if not st.frames:
            self._retval = v
            return _RETURN
        caller = st.frames[-1]
        ins = fr.ret_to
        caller.env[ins.result] = coerce(v, ins.kind)
        caller.pos += 1
        self._retire(caller, ins, caller.env[ins.result])
        return None


_RETURN = object()


def _operand_kind(op, f: Function, value) -> str:
    if isinstance(op, Global):
        return "address"
    if isinstance(op, Var):
        k = dict(f.params).get(op.name)
        if k is None:
            d = f.definitions().get(op.name)
            k = d.kind if d is not None else None
        if k is not None:
            return k
    return _native_kind(value)


def run(m: Module, inputs: dict, cfg: RunConfig | None = None) -> RunResult:
    """Execute ``main`` of ``m`` on ``inputs``."""
    return VM(m, inputs, cfg).run()


def call_function(m: Module, name: str, args: list, budget: int = 1_000_000):
    """Run function ``name`` of ``m`` on positional ``args``; returns (value, instructions executed)."""
    vm = VM(m, {}, RunConfig(step_budget=budget), entry=name, args=args)
    res = vm.run()
    if res.status != COMPLETED:
        raise RuntimeError(f"call to {name} did not complete: {res.status} {res.trap}")
    return vm._retval, res.dyn_count


def profile(m: Module, inputs: dict) -> dict[tuple[str, int], int]:
    """Execution count of every static instruction on a fault-free run."""
    res = run(m, inputs)
    if res.status != COMPLETED:
        raise RuntimeError(f"profiling run did not complete: {res.status} {res.trap}")
    counts = {}
    for f in m.functions:
        for ins in f.instructions():
            counts[(f.name, ins.id)] = res.counts.get((f.name, ins.id), 0)
    return counts


# ---------------------------------------------------------------------------
# Recovery-facing snapshot

UNAVAILABLE = object()


class LiveState:
    """Read-only, liveness-gated view of a trapped machine state.

    Readable: values live into the faulting instruction, the function's
    arguments, stack slots (``slot.NAME`` reads the slot's content, ``NAME``
    its address) and globals (``global.NAME`` is the array base).
    """

    def __init__(self, trap: TrapRecord, lm: LivenessMap, state: MachineState):
        fr = state.frame
        self._env = fr.env
        self._live = lm.live_in[trap.instr]
        self._params = {p for p, _ in fr.function.params}
        self._slots = dict(fr.slots)
        self._globals = dict(state.global_bases)
        self._memory = state.memory
        self.reads = 0

    def read(self, name: str):
        self.reads += 1
        if name.startswith("global."):
            return self._globals.get(name[7:], UNAVAILABLE)
        if name.startswith("slot."):
            addr = self._slots.get(name[5:])
            if addr is None:
                return UNAVAILABLE
            r, idx = self._memory.locate(addr)
            return r.data[idx]
        if name in self._slots:
            return self._slots[name]
        if name in self._live or name in self._params:
            return self._env.get(name, UNAVAILABLE)
        return UNAVAILABLE

    def readable(self, name: str) -> bool:
        n = self.reads
        ok = self.read(name) is not UNAVAILABLE
        self.reads = n
        return ok


def snapshot_live_state(trap: TrapRecord, lm: LivenessMap, state: MachineState) -> LiveState:
    return LiveState(trap, lm, state)
