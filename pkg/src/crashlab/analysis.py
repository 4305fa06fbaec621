"""CFG, loop, liveness and add-recurrence analyses over the mini IR."""

from __future__ import annotations

from dataclasses import dataclass, field

from .mir import BINOPS, Function, Global, Imm, Instr, Operand, Var, dominators

__all__ = [
    "AddRecInfo", "Expr", "LivenessMap", "LoopInfo", "compute_liveness",
    "find_loops", "is_invariant", "is_used_in_addr_compute", "loop_phis",
    "reverse_postorder", "scev_analyze",
]


def reverse_postorder(f: Function) -> list[str]:
    succ = {b.label: b.successors() for b in f.blocks}
    seen: set[str] = set()
    post: list[str] = []

    def dfs(b: str) -> None:
        seen.add(b)
        for s in succ.get(b, []):
            if s not in seen and s in succ:
                dfs(s)
        post.append(b)

    dfs(f.entry)
    return post[::-1]


# ---------------------------------------------------------------------------
# Liveness


@dataclass
class LivenessMap:
    """Per-instruction live-in / live-out sets, keyed by instruction id."""

    live_in: dict[int, frozenset]
    live_out: dict[int, frozenset]

    def live_at(self, iid: int) -> frozenset:
        return self.live_in[iid]


def _uses_defs(ins: Instr) -> tuple[set[str], set[str]]:
    # phi operands are used on the incoming edge, not at the phi
    uses = set() if ins.opcode == "phi" else set(ins.uses())
    defs = {ins.result} if ins.result is not None else set()
    return uses, defs


def compute_liveness(f: Function) -> LivenessMap:
    """Backward may-dataflow to a fixpoint at instruction granularity."""
    blocks = {b.label: b for b in f.blocks}
    order = reverse_postorder(f)[::-1]
    order += [b.label for b in f.blocks if b.label not in order]
    ud = {ins.id: _uses_defs(ins) for ins in f.instructions()}
    live_in: dict[int, frozenset] = {ins.id: frozenset() for ins in f.instructions()}
    live_out: dict[int, frozenset] = dict(live_in)
    changed = True
    while changed:
        changed = False
        for label in order:
            b = blocks[label]
            out: set[str] = set()
            for s in b.successors():
                sb = blocks[s]
                if sb.instrs:
                    out |= live_in[sb.instrs[0].id]
                for phi in sb.phis():
                    for op, lab in phi.incoming():
                        if lab == label and isinstance(op, Var):
                            out.add(op.name)
            for ins in reversed(b.instrs):
                uses, defs = ud[ins.id]
                fo = frozenset(out)
                new_in = frozenset(uses | (out - defs))
                if live_out[ins.id] != fo or live_in[ins.id] != new_in:
                    live_out[ins.id] = fo
                    live_in[ins.id] = new_in
                    changed = True
                out = set(new_in)
    return LivenessMap(live_in, live_out)


# ---------------------------------------------------------------------------
# Loops


@dataclass(eq=False)
class LoopInfo:
    header: str
    latch: str | None
    latches: tuple
    body: frozenset
    preheader: str | None = None
    exits: tuple = ()
    parent: "LoopInfo | None" = None
    depth: int = 1

    def contains(self, label: str) -> bool:
        return label in self.body

    def __repr__(self) -> str:
        return f"LoopInfo(header={self.header!r}, latch={self.latch!r}, body={sorted(self.body)})"


def find_loops(f: Function) -> list[LoopInfo]:
    """All natural loops, innermost first (ties broken by header position)."""
    dom = dominators(f)
    succ = {b.label: b.successors() for b in f.blocks}
    preds = f.predecessors()
    index = {b.label: n for n, b in enumerate(f.blocks)}
    latches: dict[str, list[str]] = {}
    for b in f.blocks:
        if b.label not in dom:
            continue
        for s in succ[b.label]:
            if s in dom[b.label]:
                latches.setdefault(s, []).append(b.label)
    loops = []
    for header, ls in latches.items():
        body = {header}
        stack = [l for l in ls if l != header]
        while stack:
            n = stack.pop()
            if n in body:
                continue
            body.add(n)
            stack.extend(p for p in preds[n] if p in dom)
        outside = [p for p in preds[header] if p not in body and p in dom]
        exits = sorted({s for n in body for s in succ[n] if s not in body}, key=index.get)
        ls = sorted(ls, key=index.get)
        loops.append(LoopInfo(
            header=header,
            latch=ls[0] if len(ls) == 1 else None,
            latches=tuple(ls),
            body=frozenset(body),
            preheader=outside[0] if len(outside) == 1 else None,
            exits=tuple(exits),
        ))
    for lp in loops:
        enclosing = [o for o in loops if o is not lp and lp.body < o.body]
        if enclosing:
            lp.parent = min(enclosing, key=lambda o: len(o.body))
        lp.depth = 1 + len(enclosing)
    loops.sort(key=lambda lp: (-lp.depth, index[lp.header]))
    return loops


def loop_phis(lp: LoopInfo, f: Function) -> list[Instr]:
    return f.block(lp.header).phis()


# ---------------------------------------------------------------------------
# Symbolic init/step expressions


@dataclass(frozen=True)
class Expr:
    """Tiny folded expression over constants, values and globals."""

    op: str  # const | val | glob | add | mul
    args: tuple = field(default=())

    @staticmethod
    def const(n: int) -> "Expr":
        return Expr("const", (n,))

    @staticmethod
    def val(name: str) -> "Expr":
        return Expr("val", (name,))

    @staticmethod
    def of(op: Operand, defs: dict[str, Instr] | None = None) -> "Expr":
        if isinstance(op, Imm):
            return Expr.const(op.value)
        if isinstance(op, Global):
            return Expr("glob", (op.name,))
        d = (defs or {}).get(op.name)
        if d is not None and d.opcode == "const" and isinstance(d.operands[0].value, int):
            return Expr.const(d.operands[0].value)
        return Expr.val(op.name)

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def value(self):
        return self.args[0]

    def __add__(self, other: "Expr") -> "Expr":
        if self.is_const and other.is_const:
            return Expr.const(self.value + other.value)
        if self.is_const and self.value == 0:
            return other
        if other.is_const and other.value == 0:
            return self
        return Expr("add", (self, other))

    def __mul__(self, other: "Expr") -> "Expr":
        if self.is_const and other.is_const:
            return Expr.const(self.value * other.value)
        for a, b in ((self, other), (other, self)):
            if a.is_const and a.value == 0:
                return Expr.const(0)
            if a.is_const and a.value == 1:
                return b
        return Expr("mul", (self, other))

    def __neg__(self) -> "Expr":
        return Expr.const(-1) * self

    def __sub__(self, other: "Expr") -> "Expr":
        return self + (-other)

    def names(self) -> set[str]:
        if self.op == "val":
            return {self.args[0]}
        if self.op in ("add", "mul"):
            return self.args[0].names() | self.args[1].names()
        return set()

    def __str__(self) -> str:
        if self.op == "const":
            return str(self.value)
        if self.op == "val":
            return f"%{self.value}"
        if self.op == "glob":
            return f"@{self.value}"
        sym = "+" if self.op == "add" else "*"
        return f"({self.args[0]} {sym} {self.args[1]})"


@dataclass(frozen=True, eq=False)
class AddRecInfo:
    """``value`` evolves as init, init+step, init+2*step, ... across iterations of ``loop``."""

    value: str
    init: Expr
    step: Expr
    loop: LoopInfo
    is_phi: bool = False

    def __repr__(self) -> str:
        return f"AddRec(%{self.value} = {{{self.init}, +, {self.step}}} @ {self.loop.header})"


def is_invariant(op: Operand, lp: LoopInfo, f: Function, defs: dict[str, Instr] | None = None) -> bool:
    """Syntactic loop invariance: literal, global, parameter, or defined outside the body."""
    if not isinstance(op, Var):
        return True
    defs = defs if defs is not None else f.definitions()
    d = defs.get(op.name)
    if d is None:
        return True  # function parameter
    if d.opcode == "const":
        return True
    where = f.block_of()[op.name]
    return where not in lp.body


def scev_analyze(v: str, lp: LoopInfo, f: Function, _defs: dict[str, Instr] | None = None) -> AddRecInfo | None:
    """Add-recurrence of ``v`` in ``lp``, or None.

    Header phis of the form ``v = phi(init, v + step)`` are the roots;
    add/sub/mul/shl of a recurrence with an invariant (or of two recurrences
    under add/sub) are derived recurrences.
    """
    defs = _defs if _defs is not None else f.definitions()
    blocks = f.block_of()
    memo: dict[str, AddRecInfo | None] = {}

    def inv(op: Operand) -> Expr | None:
        if is_invariant(op, lp, f, defs):
            return Expr.of(op, defs)
        return None

    def rec(name: str) -> AddRecInfo | None:
        if name in memo:
            return memo[name]
        memo[name] = None
        memo[name] = res = analyze(name)
        return res

    def analyze(name: str) -> AddRecInfo | None:
        d = defs.get(name)
        if d is None or blocks.get(name) not in lp.body or d.kind not in ("int64", "address"):
            return None
        if d.opcode == "phi":
            if blocks[name] != lp.header or len(d.operands) != 2:
                return None
            outside = [(o, b) for o, b in d.incoming() if b not in lp.body]
            inside = [(o, b) for o, b in d.incoming() if b in lp.body]
            if len(outside) != 1 or len(inside) != 1 or not isinstance(inside[0][0], Var):
                return None
            nxt = defs.get(inside[0][0].name)
            if nxt is None or nxt.opcode not in ("add", "sub"):
                return None
            a, b = nxt.operands
            step = None
            if isinstance(a, Var) and a.name == name:
                step = inv(b)
                if step is not None and nxt.opcode == "sub":
                    step = -step
            elif nxt.opcode == "add" and isinstance(b, Var) and b.name == name:
                step = inv(a)
            if step is None:
                return None
            return AddRecInfo(name, Expr.of(outside[0][0], defs), step, lp, is_phi=True)
        if d.opcode not in BINOPS or d.opcode == "div":
            return None
        a, b = d.operands
        ra = rec(a.name) if isinstance(a, Var) else None
        rb = rec(b.name) if isinstance(b, Var) else None
        ia = None if ra else inv(a)
        ib = None if rb else inv(b)
        if d.opcode == "add":
            if ra and rb:
                return AddRecInfo(name, ra.init + rb.init, ra.step + rb.step, lp)
            if ra and ib is not None:
                return AddRecInfo(name, ra.init + ib, ra.step, lp)
            if rb and ia is not None:
                return AddRecInfo(name, ia + rb.init, rb.step, lp)
        elif d.opcode == "sub":
            if ra and rb:
                return AddRecInfo(name, ra.init - rb.init, ra.step - rb.step, lp)
            if ra and ib is not None:
                return AddRecInfo(name, ra.init - ib, ra.step, lp)
            if rb and ia is not None:
                return AddRecInfo(name, ia - rb.init, -rb.step, lp)
        elif d.opcode == "mul":
            if ra and ib is not None:
                return AddRecInfo(name, ra.init * ib, ra.step * ib, lp)
            if rb and ia is not None:
                return AddRecInfo(name, ia * rb.init, ia * rb.step, lp)
        elif d.opcode == "shl":
            if ra and ib is not None and ib.is_const and 0 <= ib.value < 63:
                factor = Expr.const(1 << ib.value)
                return AddRecInfo(name, ra.init * factor, ra.step * factor, lp)
        return None

    return rec(v)


def is_used_in_addr_compute(v: str, f: Function) -> bool:
    """True iff ``v`` feeds (directly or through arithmetic) an ``addr`` operand or a memory pointer.

    The walk does not continue through phis, so a recurrence's own update is
    not considered address computation merely because the phi is.
    """
    users = f.users()
    seen = {v}
    stack = [v]
    while stack:
        n = stack.pop()
        for u in users.get(n, []):
            if u.opcode == "addr":
                return True
            if u.is_memory_access:
                ptr = u.pointer
                if isinstance(ptr, Var) and ptr.name == n:
                    return True
                continue
            if u.opcode in ("phi", "condbr", "ret", "icmp") or u.result is None:
                continue
            if u.result not in seen:
                seen.add(u.result)
                stack.append(u.result)
    return False
