"""Recovery-kernel construction.

For every memory access with a computed address, the address operand is
sliced backwards until each leaf is a *terminal* value (one that the trap
handler is guaranteed to be able to read). The slice is cloned into a
standalone function, the recovery kernel, whose parameters are those
terminals. Induction-variable pairs that update in lockstep are recorded so
a corrupted induction variable can be rebuilt from its partner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .analysis import (
    Expr, LivenessMap, LoopInfo, compute_liveness, find_loops, loop_phis,
    reverse_postorder, scev_analyze,
)
from .mir import (
    BINOPS, Block, Function, Global, Imm, Instr, Module, Var, print_module, validate,
)

TABLE_VERSION = 1
TABLE_HEADER = f"#recovery-table v{TABLE_VERSION}"


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class KernelParam:
    name: str
    kind: str
    role: str  # argument | phi | live | checkpoint | slot | global


@dataclass(frozen=True)
class Unsliceable:
    value: str
    reason: str

    def __bool__(self) -> bool:
        return False


@dataclass
class RSI:
    """Backward slice of one access's address: cloned body plus terminal params."""

    instr: Instr
    body: list
    params: list
    result: object  # operand holding the address, in kernel-local names

    @property
    def is_static(self) -> bool:
        return all(p.role in ("global", "slot") for p in self.params)


@dataclass(eq=False)
class IVPair:
    """Two induction variables of one loop that advance in lockstep.

    Inits and steps are expressions over names readable at recovery time
    (arguments, ``slot.X`` checkpoint contents, live values, ``global.X``).
    """

    i: str
    k: str
    i0: Expr
    k0: Expr
    s_i: Expr
    s_k: Expr
    loop: LoopInfo
    function: str = "main"

    def members(self) -> tuple[str, str]:
        return (self.i, self.k)

    def partner(self, v: str) -> str:
        return self.k if v == self.i else self.i

    def init(self, v: str) -> Expr:
        return self.i0 if v == self.i else self.k0

    def step(self, v: str) -> Expr:
        return self.s_i if v == self.i else self.s_k

    def __repr__(self) -> str:
        return (f"IVPair({self.i}={{{self.i0},+,{self.s_i}}}, "
                f"{self.k}={{{self.k0},+,{self.s_k}}} @ {self.loop.header})")


@dataclass
class RecoveryKernel:
    key: str
    symbol: str
    function: str
    instr: int
    body: list
    params: list
    result: object
    iv_repairs: list = field(default_factory=list)

    def to_function(self) -> Function:
        ret = Instr("ret", [self.result])
        return Function(self.symbol, [(p.name, p.kind) for p in self.params],
                        [Block("entry", [*_copy_body(self.body), ret])], ret_kind="address", pure=True)


def _copy_body(body: list) -> list:
    return [Instr(i.opcode, list(i.operands), result=i.result, kind=i.kind, labels=list(i.labels),
                  pred=i.pred, callee=i.callee) for i in body]


@dataclass
class RecoveryTable:
    version: int = TABLE_VERSION
    entries: dict = field(default_factory=dict)  # key -> (symbol, [(name, kind)])

    def add(self, key: str, symbol: str, params: list) -> None:
        if key in self.entries:
            raise BuildError(f"duplicate recovery-table key {key}")
        self.entries[key] = (symbol, [tuple(p) for p in params])

    def serialize(self) -> str:
        lines = [f"#recovery-table v{self.version}"]
        for key in sorted(self.entries):
            sym, params = self.entries[key]
            lines.append(f"{key}\t{sym}\t" + ",".join(f"{n}:{k}" for n, k in params))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RecoveryTable":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#recovery-table v"):
            raise BuildError("missing recovery-table header")
        table = cls(version=int(lines[0].rsplit("v", 1)[1]))
        for ln in lines[1:]:
            key, sym, plist = ln.split("\t")
            params = [tuple(p.rsplit(":", 1)) for p in plist.split(",") if p]
            table.add(key, sym, params)
        return table

    def __eq__(self, other) -> bool:
        return isinstance(other, RecoveryTable) and self.version == other.version \
            and self.entries == other.entries


@dataclass
class RecoveryBundle:
    """Everything the trap handler needs: table, kernels and their module."""

    table: RecoveryTable
    kernels: dict  # key -> RecoveryKernel
    module: Module  # recovery functions plus the pure functions they call
    pairs: list
    liveness: dict  # function name -> LivenessMap
    unsliceable: list = field(default_factory=list)  # (function, instr id, Unsliceable)

    def kernel_for(self, key: str) -> RecoveryKernel | None:
        return self.kernels.get(key)


# ---------------------------------------------------------------------------
# slicing

_SLICE_OPS = set(BINOPS) | {"addr", "const", "icmp", "call"}


def build_rsi(ins: Instr, f: Function, lm: LivenessMap) -> RSI | Unsliceable:
    """Slice the address operand of ``ins`` back to terminal values.

    A value is cloned into the slice when all its operands can be obtained
    (recursively); otherwise it must itself be live at ``ins`` to serve as a
    parameter. Arguments, header phis live at ``ins``, stack slots and globals
    are always terminals.
    """
    if not ins.is_memory_access:
        raise BuildError("build_rsi needs a load or store")
    live = lm.live_in[ins.id]
    defs = f.definitions()
    args = dict(f.params)
    failed: dict[str, Unsliceable] = {}
    memo: dict[str, bool] = {}

    def slot_of(d: Instr) -> str | None:
        ptr = d.operands[0]
        if isinstance(ptr, Var) and ptr.name in defs and defs[ptr.name].opcode == "alloc":
            return ptr.name
        return None

    def recomputable(d: Instr) -> bool:
        return d.opcode in _SLICE_OPS and all(obtainable(o) for o in d.operands)

    def obtainable(op) -> bool:
        if not isinstance(op, Var):
            return True
        name = op.name
        if name not in memo:
            memo[name] = False  # SSA slices are acyclic outside phis
            memo[name] = res = _obtainable(name)
            if not res and name not in failed:
                failed[name] = Unsliceable(name, _why(defs[name]))
        return memo[name]

    def _obtainable(name: str) -> bool:
        if name in args:
            return True
        d = defs[name]
        if d.opcode == "alloc" or (d.opcode == "load" and slot_of(d)):
            return True
        if d.opcode != "phi" and recomputable(d):
            return True
        return name in live

    def _why(d: Instr) -> str:
        if d.opcode == "phi":
            return "phi value is dead at the access"
        if d.opcode == "load":
            return "loaded value is dead at the access"
        return f"{d.opcode} operand is dead at the access and not recomputable"

    ptr = ins.pointer
    if not obtainable(ptr):
        first = next(iter(failed.values()))
        return first
    if isinstance(ptr, Var) and ptr.name not in args:
        d = defs[ptr.name]
        terminal = d.opcode in ("phi", "alloc") or (d.opcode == "load" and slot_of(d))
        if not terminal and not recomputable(d):
            # the pointer itself is what a fault corrupts; it cannot be its own input
            return next((u for n, u in failed.items() if n != ptr.name),
                        Unsliceable(ptr.name, _why(d)))

    params: dict[str, KernelParam] = {}
    rename: dict[str, str] = {}
    needed: set[str] = set()

    def expand(op) -> None:
        if isinstance(op, Imm):
            return
        if isinstance(op, Global):
            pname = "global." + op.name
            params[pname] = KernelParam(pname, "address", "global")
            return
        name = op.name
        if name in needed or name in params or name in rename:
            return
        if name in args:
            params[name] = KernelParam(name, args[name], "argument")
            return
        d = defs[name]
        if d.opcode == "alloc":
            params[name] = KernelParam(name, "address", "slot")
        elif d.opcode == "load" and slot_of(d):
            pname = "slot." + slot_of(d)
            params[pname] = KernelParam(pname, d.kind, "checkpoint")
            rename[name] = pname
        elif d.opcode == "phi":
            params[name] = KernelParam(name, d.kind, "phi")
        elif recomputable(d):
            needed.add(name)
            for o in d.operands:
                expand(o)
        else:
            params[name] = KernelParam(name, d.kind, "live")

    expand(ptr)
    order = {}
    for b in reverse_postorder(f):
        for ins2 in f.block(b).instrs:
            order[ins2.result] = len(order)

    def local(o):
        if isinstance(o, Global):
            return Var("global." + o.name)
        if isinstance(o, Var) and o.name in rename:
            return Var(rename[o.name])
        return o

    body = []
    for n in sorted(needed, key=lambda n: order[n]):
        d = defs[n]
        body.append(Instr(d.opcode, [local(o) for o in d.operands], result=n, kind=d.kind,
                          pred=d.pred, callee=d.callee))
    role_rank = {"argument": 0, "phi": 1, "live": 1, "checkpoint": 2, "slot": 2, "global": 3}
    argpos = {p: n for n, (p, _) in enumerate(f.params)}

    def pkey(p: KernelParam):
        r = role_rank[p.role]
        if r == 0:
            return (0, argpos[p.name], p.name)
        if r == 1:
            return (1, order.get(p.name, 0), p.name)
        return (r, 0, p.name)

    return RSI(ins, body, sorted(params.values(), key=pkey), local(ptr))


# ---------------------------------------------------------------------------
# induction-variable pairs


def _backward_phis(v: str, f: Function, defs: dict, header_phis: set[str]) -> set[str]:
    """Header phis reachable backwards from ``v`` without crossing a phi."""
    out: set[str] = set()
    seen: set[str] = set()
    stack = [v]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        if n in header_phis:
            out.add(n)
            continue
        d = defs.get(n)
        # loaded values are data, not arithmetic on the induction variable
        if d is None or d.opcode in ("phi", "load"):
            continue
        stack.extend(d.uses())
    return out


def resolve_expr(e: Expr, f: Function, lp: LoopInfo, latch_live: frozenset,
                 defs: dict | None = None) -> Expr | None:
    """Rewrite ``e`` over names readable anywhere in ``lp``, or None.

    A name resolves when it is a constant, a function argument, a reload of a
    checkpoint slot (read as ``slot.X``) or a value live at the latch, which
    for a value defined outside the loop means live throughout the body.
    Dead values are not recomputed from their operands.
    """
    defs = defs if defs is not None else f.definitions()
    if e.op in ("const", "glob"):
        return e
    if e.op in ("add", "mul"):
        a = resolve_expr(e.args[0], f, lp, latch_live, defs)
        b = resolve_expr(e.args[1], f, lp, latch_live, defs)
        if a is None or b is None:
            return None
        return a + b if e.op == "add" else a * b
    name = e.value
    if name in dict(f.params):
        return e
    d = defs.get(name)
    if d is None or f.block_of().get(name) in lp.body:
        return None
    if d.opcode == "load":
        ptr = d.operands[0]
        if isinstance(ptr, Var) and ptr.name in defs and defs[ptr.name].opcode == "alloc":
            return Expr.val("slot." + ptr.name)
    if d.opcode == "const" and isinstance(d.operands[0].value, int):
        return Expr.const(d.operands[0].value)
    if name in latch_live:
        return e
    return None


def pair_induction_variables(lp: LoopInfo, f: Function, lm: LivenessMap | None = None) -> list[IVPair]:
    """Unordered pairs of lockstep induction variables of ``lp`` usable for repair."""
    if lp.latch is None:
        return []
    lm = lm or compute_liveness(f)
    defs = f.definitions()
    latch_live = lm.live_in[f.block(lp.latch).terminator.id]
    recs = []
    for phi in loop_phis(lp, f):
        ar = scev_analyze(phi.result, lp, f, defs)
        if ar is None or not ar.is_phi:
            continue
        init = resolve_expr(ar.init, f, lp, latch_live, defs)
        step = resolve_expr(ar.step, f, lp, latch_live, defs)
        if init is None or step is None or (step.is_const and step.value == 0):
            continue
        recs.append((phi, init, step))
    header_phis = {phi.result for phi, _, _ in recs}
    # header phis each induction variable's init/step/update depends on
    depends: dict[str, set[str]] = {}
    for phi, _, _ in recs:
        deps: set[str] = set()
        for op in phi.operands:
            if isinstance(op, Var) and op.name != phi.result:
                deps |= _backward_phis(op.name, f, defs, header_phis)
        deps.discard(phi.result)
        depends[phi.result] = deps
    co_addressed: list[set[str]] = []
    for ins in f.instructions():
        roots = []
        if ins.opcode == "addr":
            roots = ins.uses()
        elif ins.is_memory_access and isinstance(ins.pointer, Var):
            roots = [ins.pointer.name]
        s: set[str] = set()
        for r in roots:
            s |= _backward_phis(r, f, defs, header_phis)
        if len(s) > 1:
            co_addressed.append(s)
    pairs = []
    for a in range(len(recs)):
        for b in range(a + 1, len(recs)):
            (pi, i0, si), (pk, k0, sk) = recs[a], recs[b]
            i, k = pi.result, pk.result
            if i in depends[k] or k in depends[i]:
                continue
            if any(i in s and k in s for s in co_addressed):
                continue
            pairs.append(IVPair(i, k, i0, k0, si, sk, lp, f.name))
    pairs.sort(key=lambda p: (defs[p.i].id, defs[p.k].id))
    return pairs


def count_recoverable_ivs(m: Module) -> tuple[int, int]:
    """(number of loops, induction variables belonging to at least one pair)."""
    loops = 0
    ivs: set[tuple[str, str]] = set()
    for f in m.functions:
        lm = compute_liveness(f)
        for lp in find_loops(f):
            loops += 1
            for p in pair_induction_variables(lp, f, lm):
                ivs.add((f.name, p.i))
                ivs.add((f.name, p.k))
    return loops, len(ivs)


# ---------------------------------------------------------------------------
# kernels and table


def build_kernel(ins: Instr, f: Function, lm: LivenessMap, pairs: list[IVPair],
                 symbol: str = "recovery_k1") -> RecoveryKernel | None:
    """Recovery kernel for one access, or None when unsliceable or static."""
    rsi = build_rsi(ins, f, lm)
    if not rsi or rsi.is_static:
        return None
    names = {p.name for p in rsi.params}
    repairs = [p for p in pairs if p.function == f.name and (p.i in names or p.k in names)]
    return RecoveryKernel(ins.debug.key, symbol, f.name, ins.id, rsi.body, rsi.params,
                          rsi.result, repairs)


def build_bundle(m: Module) -> RecoveryBundle:
    """Kernels, table and pairs for every eligible access in ``m``."""
    table = RecoveryTable()
    kernels: dict[str, RecoveryKernel] = {}
    kmod = Module(source=m.source)
    pairs_all: list[IVPair] = []
    liveness = {}
    unsliceable = []
    n = 0
    for f in m.functions:
        lm = compute_liveness(f)
        liveness[f.name] = lm
        pairs = []
        for lp in find_loops(f):
            pairs.extend(pair_induction_variables(lp, f, lm))
        pairs_all.extend(pairs)
        for ins in f.instructions():
            if not ins.is_memory_access:
                continue
            rsi = build_rsi(ins, f, lm)
            if not rsi:
                unsliceable.append((f.name, ins.id, rsi))
                continue
            if rsi.is_static:
                continue
            n += 1
            k = build_kernel(ins, f, lm, pairs, symbol=f"recovery_k{n}")
            table.add(k.key, k.symbol, [(p.name, p.kind) for p in k.params])
            kernels[k.key] = k
            kmod.functions.append(k.to_function())
    called = {i.callee for kf in kmod.functions for i in kf.instructions() if i.opcode == "call"}
    for f in m.functions:
        if f.pure and f.name in called:
            kmod.functions.append(f)
    for kf in kmod.functions:
        kf.renumber()
    problems = validate(kmod)
    if problems:
        raise BuildError(f"invalid recovery kernel: {problems[0]}")
    return RecoveryBundle(table, kernels, kmod, pairs_all, liveness, unsliceable)


def emit_recovery_table(m: Module) -> RecoveryTable:
    return build_bundle(m).table


def format_pairs(pairs: list[IVPair]) -> str:
    lines = ["function\tloop\ti\tk\ti0\tk0\ts_i\ts_k"]
    for p in pairs:
        lines.append("\t".join([p.function, p.loop.header, p.i, p.k,
                                str(p.i0), str(p.k0), str(p.s_i), str(p.s_k)]))
    return "\n".join(lines) + "\n"


def write_bundle(bundle: RecoveryBundle, outdir) -> list[str]:
    """Write ``recovery.table``, ``kernels.mir`` and ``ivpairs.tsv`` into ``outdir``."""
    from pathlib import Path

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "recovery.table": bundle.table.serialize(),
        "kernels.mir": print_module(bundle.module),
        "ivpairs.tsv": format_pairs(bundle.pairs),
    }
    for name, text in files.items():
        (out / name).write_text(text)
    return sorted(files)


# ---------------------------------------------------------------------------
# expression evaluation at recovery time


def eval_expr(e: Expr, read) -> int | None:
    """Evaluate ``e`` with ``read(name)`` supplying values; None if any is unavailable."""
    if e.op == "const":
        return e.value
    if e.op == "glob":
        v = read("global." + e.value)
    elif e.op == "val":
        v = read(e.value)
    else:
        a = eval_expr(e.args[0], read)
        b = eval_expr(e.args[1], read)
        if a is None or b is None:
            return None
        return a + b if e.op == "add" else a * b
    if not isinstance(v, int):
        return None
    return v
