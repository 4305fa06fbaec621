"""Loop transforms that create or expose induction-variable redundancy.

``strength_reduce`` and ``unroll`` are the classic optimizations whose side
effects produce partner induction variables; ``icp`` turns derived induction
values into independent ones and ``micro_checkpoint`` spills otherwise-dead
initial values to stack slots so they survive into the loop.

Each transform mutates the function it is given; callers that want to keep the
original should clone the module first (``apply_passes`` does).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .analysis import (
    Expr, LoopInfo, compute_liveness, find_loops, is_invariant,
    is_used_in_addr_compute, loop_phis, scev_analyze,
)
from .mir import (
    Block, Function, Global, Imm, Instr, Module, Operand, Var,
    assign_debug_tags, validate,
)

PASS_ORDER = ("sr", "unroll", "icp", "mck")


class TransformError(ValueError):
    pass


@dataclass
class TransformReport:
    pass_name: str
    loop: LoopInfo | None = None
    function: str = "main"
    created_values: list = field(default_factory=list)
    replaced_values: list = field(default_factory=list)  # (old, new)
    checkpoint_slots: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def changed(self) -> bool:
        return bool(self.created_values or self.replaced_values or self.checkpoint_slots)

    def format(self) -> str:
        where = f"{self.function}:{self.loop.header}" if self.loop else self.function
        parts = [f"pass={self.pass_name}", f"loop={where}",
                 "created=" + ",".join(self.created_values),
                 "replaced=" + ",".join(f"{a}->{b}" for a, b in self.replaced_values),
                 "slots=" + ",".join(self.checkpoint_slots)]
        if self.notes:
            parts.append("notes=" + "; ".join(self.notes))
        return " ".join(parts)


# ---------------------------------------------------------------------------
# helpers


def _insert_before_terminator(block: Block, instrs: list[Instr]) -> None:
    at = len(block.instrs) - 1 if block.terminator is not None else len(block.instrs)
    block.instrs[at:at] = instrs


def _insert_after_phis(block: Block, instrs: list[Instr]) -> None:
    at = len(block.phis())
    block.instrs[at:at] = instrs


def _fresh_label(f: Function, stem: str) -> str:
    taken = {b.label for b in f.blocks}
    if stem not in taken:
        return stem
    n = 1
    while f"{stem}.{n}" in taken:
        n += 1
    return f"{stem}.{n}"


class _Emitter:
    """Appends fresh instructions to a list, naming results uniquely in ``f``."""

    def __init__(self, f: Function, out: list[Instr]):
        self.f = f
        self.out = out
        self.names: set[str] = set()

    def name(self, stem: str) -> str:
        n = self.f.fresh(stem)
        k = 1
        while n in self.names:
            n = self.f.fresh(f"{stem}.x{k}")
            k += 1
        self.names.add(n)
        return n

    def emit(self, opcode: str, operands: list, stem: str, kind: str, **kw) -> Var:
        res = self.name(stem)
        self.out.append(Instr(opcode, list(operands), result=res, kind=kind, **kw))
        return Var(res)

    def expr(self, e: Expr, kind: str, stem: str) -> Operand:
        """Materialize a folded init/step expression as instructions."""
        if e.op == "const":
            return Imm(e.value)
        if e.op == "val":
            return Var(e.value)
        if e.op == "glob":
            return Global(e.value)
        a = self.expr(e.args[0], kind, stem)
        b = self.expr(e.args[1], kind, stem)
        if e.op == "mul":
            if kind == "address":
                raise TransformError("cannot scale an address-valued recurrence")
            return self.emit("mul", [a, b], stem, "int64")
        k = "address" if kind == "address" and (_addr_operand(a, self) or _addr_operand(b, self)) else "int64"
        return self.emit("add", [a, b], stem, k)


def _addr_operand(op: Operand, em: _Emitter) -> bool:
    if isinstance(op, Global):
        return True
    if isinstance(op, Var):
        kinds = em.f.value_kinds()
        for ins in em.out:
            if ins.result is not None:
                kinds[ins.result] = ins.kind
        return kinds.get(op.name) == "address"
    return False


def _has_side_effect(ins: Instr) -> bool:
    # calls only reach pure functions, so they are removable like arithmetic
    return ins.opcode in ("store", "br", "condbr", "ret")


def remove_dead(f: Function, seeds: list[str]) -> list[str]:
    """Delete side-effect-free instructions among ``seeds`` (and their operand
    chains) once they have no remaining users. Returns removed value names."""
    removed = []
    work = list(seeds)
    while work:
        name = work.pop()
        defs = f.definitions()
        d = defs.get(name)
        if d is None or d.opcode == "phi" or _has_side_effect(d):
            continue
        if f.users().get(name):
            continue
        f.remove(d)
        removed.append(name)
        work.extend(d.uses())
    return removed


def _header_phi_inputs(lp: LoopInfo, f: Function) -> set[str]:
    out = set()
    for phi in loop_phis(lp, f):
        for op, lab in phi.incoming():
            if lab in lp.body and isinstance(op, Var):
                out.add(op.name)
    return out


def _body_instrs(lp: LoopInfo, f: Function) -> list[Instr]:
    return [ins for b in f.blocks if b.label in lp.body for ins in b.instrs]


def _add_recurrence(f: Function, lp: LoopInfo, name_stem: str, kind: str,
                    init: Expr, step: Expr) -> tuple[str, list[str]]:
    """New header phi {init, +, step} with init/step built in the preheader."""
    pre = f.block(lp.preheader)
    pre_code: list[Instr] = []
    em = _Emitter(f, pre_code)
    init_op = em.expr(init, kind, name_stem + ".init")
    step_op = em.expr(step, "int64", name_stem + ".step")
    _insert_before_terminator(pre, pre_code)
    phi_name = em.name(name_stem)
    next_name = em.name(phi_name + ".next")
    phi = Instr("phi", [init_op, Var(next_name)], result=phi_name, kind=kind,
                labels=[lp.preheader, lp.latch])
    inc = Instr("add", [Var(phi_name), step_op], result=next_name, kind=kind)
    _insert_after_phis(f.block(lp.header), [phi])
    _insert_before_terminator(f.block(lp.latch), [inc])
    created = [i.result for i in pre_code] + [phi_name, next_name]
    return phi_name, created


def _simple_loop(lp: LoopInfo) -> bool:
    return lp.latch is not None and lp.preheader is not None


# ---------------------------------------------------------------------------
# strength reduction


def strength_reduce(lp: LoopInfo, f: Function) -> TransformReport:
    """Replace ``mul``/``shl`` of a recurrence by an invariant with an additive recurrence.

    A single-use chain of invariant add/sub on top of the product is folded
    into the new recurrence, so ``3*i + 5`` becomes ``{5, +, 3}``.
    """
    rep = TransformReport("sr", lp, f.name)
    if not _simple_loop(lp):
        rep.notes.append("loop has no unique latch/preheader")
        return rep
    feeding_phis = _header_phi_inputs(lp, f)
    done: set[str] = set()
    for ins in list(_body_instrs(lp, f)):
        if ins.opcode not in ("mul", "shl") or ins.result in done:
            continue
        if ins.result not in f.definitions():  # removed by an earlier rewrite
            continue
        ar = scev_analyze(ins.result, lp, f)
        if ar is None:
            continue
        target = ins
        users = f.users()
        while True:
            us = users.get(target.result, [])
            if len(us) != 1 or us[0].opcode not in ("add", "sub"):
                break
            u = us[0]
            other = u.operands[1] if isinstance(u.operands[0], Var) and u.operands[0].name == target.result \
                else u.operands[0]
            if not is_invariant(other, lp, f) or f.block_of()[u.result] not in lp.body:
                break
            if scev_analyze(u.result, lp, f) is None:
                break
            target = u
        if target.result in feeding_phis:
            continue
        tr = scev_analyze(target.result, lp, f)
        k, created = _add_recurrence(f, lp, "sr." + target.result, target.kind, tr.init, tr.step)
        f.replace_uses(target.result, Var(k))
        rep.created_values.extend(created)
        rep.replaced_values.append((target.result, k))
        removed = remove_dead(f, [target.result])
        done.update(removed)
    return rep


# ---------------------------------------------------------------------------
# unrolling


def _unroll_shape(lp: LoopInfo, f: Function):
    """Match a rotated single-block loop ``i = phi(i0, i+s) ... condbr (i+s != N)``."""
    if lp.body != frozenset({lp.header}) or lp.latch != lp.header or lp.preheader is None:
        return None
    H = f.block(lp.header)
    P = f.block(lp.preheader)
    if P.terminator is None or P.terminator.opcode != "br":
        return None
    term = H.terminator
    if term is None or term.opcode != "condbr" or term.labels[0] != H.label or term.labels[1] == H.label:
        return None
    defs = f.definitions()
    cond = term.operands[0]
    if not isinstance(cond, Var) or cond.name not in defs:
        return None
    cmp = defs[cond.name]
    if cmp.opcode != "icmp" or cmp.pred != "ne" or f.block_of()[cmp.result] != H.label:
        return None
    for a, b in (tuple(cmp.operands), tuple(reversed(cmp.operands))):
        if not isinstance(a, Var) or not is_invariant(b, lp, f):
            continue
        inc = defs.get(a.name)
        if inc is None or inc.opcode != "add" or inc.kind != "int64":
            continue
        x, y = inc.operands
        if isinstance(y, Var) and isinstance(x, Imm):
            x, y = y, x
        if not isinstance(x, Var) or not isinstance(y, Imm) or not isinstance(y.value, int) or y.value == 0:
            continue
        phi = defs.get(x.name)
        if phi is None or phi not in H.phis():
            continue
        inc_ops = dict((lab, op) for op, lab in phi.incoming())
        back = inc_ops.get(H.label)
        if not isinstance(back, Var) or back.name != inc.result or lp.preheader not in inc_ops:
            continue
        return {"phi": phi, "inc": inc, "cmp": cmp, "N": b, "step": y.value,
                "init": inc_ops[lp.preheader], "exit": term.labels[1]}
    return None


def _subst(op: Operand, mp: dict[str, Operand]) -> Operand:
    if isinstance(op, Var) and op.name in mp:
        return mp[op.name]
    return op


def unroll(lp: LoopInfo, f: Function, factor: int) -> TransformReport:
    """Unroll a rotated single-block counted loop ``factor`` times with a remainder loop.

    Copy ``c`` of the body sees the primary induction variable as ``i + c*s``;
    the unrolled loop advances by ``factor*s``. Iterations left over when the
    trip count is not a multiple of ``factor`` run in the original loop, which
    is kept as the epilogue and keeps its debug tags; memory accesses in the
    copies are untagged until ``assign_debug_tags`` runs on the module.
    """
    rep = TransformReport(f"unroll:{factor}", lp, f.name)
    if factor < 1:
        raise TransformError("unroll factor must be positive")
    if len(lp.latches) > 1:
        raise TransformError(f"loop at {lp.header} has multiple latches")
    if factor == 1:
        return rep
    shape = _unroll_shape(lp, f)
    if shape is None:
        rep.notes.append("unsupported loop shape")
        return rep
    H = f.block(lp.header)
    P = f.block(lp.preheader)
    E = shape["exit"]
    iv, s, N, i0 = shape["phi"], shape["step"], shape["N"], shape["init"]
    phis = H.phis()
    body = H.instrs[len(phis):-1]
    init = {p.result: dict((lab, op) for op, lab in p.incoming())[P.label] for p in phis}
    nxt = {p.result: dict((lab, op) for op, lab in p.incoming())[H.label] for p in phis}
    defined_here = {ins.result for ins in H.instrs if ins.result is not None}
    outside_used: list[str] = []
    for b in f.blocks:
        if b.label == H.label:
            continue
        for ins in b.instrs:
            for name in ins.uses():
                if name in defined_here and name not in outside_used:
                    outside_used.append(name)
    kinds = f.value_kinds()

    UL = Block(_fresh_label(f, H.label + ".unroll"))
    MID = Block(_fresh_label(f, H.label + ".mid"))
    JOIN = Block(_fresh_label(f, H.label + ".join"))
    pos = f.blocks.index(H)
    f.blocks[pos:pos] = [UL, MID]
    f.blocks.insert(f.blocks.index(H) + 1, JOIN)

    # trip arithmetic in the preheader
    pre_code: list[Instr] = []
    em = _Emitter(f, pre_code)
    tc = em.emit("sub", [N, i0], "unroll.tc", "int64")
    trips = tc if s == 1 else em.emit("div", [tc, Imm(s)], "unroll.trips", "int64")
    q = em.emit("div", [trips, Imm(factor)], "unroll.q", "int64")
    span = em.emit("mul", [q, Imm(factor * s)], "unroll.span", "int64")
    uend = em.emit("add", [i0, span], "unroll.end", "int64")
    hasu = em.emit("icmp", [q, Imm(0)], "unroll.any", "int64", pred="ne")
    P.instrs[-1:-1] = pre_code
    P.instrs[-1] = Instr("condbr", [hasu], labels=[UL.label, MID.label])
    rep.created_values.extend(i.result for i in pre_code)

    # unrolled loop
    ul_code: list[Instr] = []
    em = _Emitter(f, ul_code)
    f_ul_names = {p.result: em.name(p.result + ".u") for p in phis}
    maps: list[dict[str, Operand]] = []
    for c in range(factor):
        mp: dict[str, Operand] = {}
        for p in phis:
            if p is iv:
                mp[p.result] = Var(f_ul_names[p.result]) if c == 0 else \
                    em.emit("add", [Var(f_ul_names[p.result]), Imm(c * s)], f"{p.result}.{c}", "int64")
            else:
                mp[p.result] = Var(f_ul_names[p.result]) if c == 0 else _subst(nxt[p.result], maps[c - 1])
        for ins in body:
            clone = Instr(ins.opcode, [_subst(o, mp) for o in ins.operands], kind=ins.kind,
                          labels=list(ins.labels), pred=ins.pred, callee=ins.callee, origin=ins.debug)
            if ins.result is not None:
                clone.result = em.name(f"{ins.result}.u{c}")
                mp[ins.result] = Var(clone.result)
            ul_code.append(clone)
        maps.append(mp)
    last = maps[-1]
    inext_u = em.emit("add", [Var(f_ul_names[iv.result]), Imm(factor * s)], iv.result + ".u.next", "int64")
    cont = em.emit("icmp", [inext_u, uend], "unroll.cont", "int64", pred="ne")
    ul_phis = []
    for p in phis:
        back = inext_u if p is iv else _subst(nxt[p.result], last)
        ul_phis.append(Instr("phi", [init[p.result], back], result=f_ul_names[p.result], kind=p.kind,
                             labels=[P.label, UL.label]))
    UL.instrs = ul_phis + ul_code + [Instr("condbr", [cont], labels=[UL.label, MID.label])]

    # merge block in front of the remainder loop
    mid_code: list[Instr] = []
    em = _Emitter(f, mid_code)
    mid_phi: dict[str, str] = {}
    for p in phis:
        back = inext_u if p is iv else _subst(nxt[p.result], last)
        mid_phi[p.result] = em.emit("phi", [init[p.result], back], p.result + ".m", p.kind,
                                    labels=[P.label, UL.label]).name
    for v in outside_used:
        zero = Imm(0.0) if kinds[v] == "float64" else Imm(0)
        mid_phi["out:" + v] = em.emit("phi", [zero, _subst(Var(v), last)], v + ".m", kinds[v],
                                      labels=[P.label, UL.label]).name
    rem = em.emit("icmp", [Var(mid_phi[iv.result]), N], "unroll.rem", "int64", pred="ne")
    MID.instrs = mid_code + [Instr("condbr", [rem], labels=[H.label, JOIN.label])]

    # remainder loop = original loop, entered from MID, leaving through JOIN
    for p in phis:
        for n, lab in enumerate(p.labels):
            if lab == P.label:
                p.labels[n] = MID.label
                p.operands[n] = Var(mid_phi[p.result])
    H.instrs[-1].labels[1] = JOIN.label

    join_code: list[Instr] = []
    em = _Emitter(f, join_code)
    renamed: dict[str, Operand] = {}
    for v in outside_used:
        renamed[v] = em.emit("phi", [Var(mid_phi["out:" + v]), Var(v)], v + ".j", kinds[v],
                             labels=[MID.label, H.label])
    JOIN.instrs = join_code + [Instr("br", labels=[E])]
    skip = {H.label, UL.label, MID.label, JOIN.label}
    for b in f.blocks:
        if b.label in skip:
            continue
        for ins in b.instrs:
            ins.operands = [_subst(o, renamed) for o in ins.operands]
            if ins.opcode == "phi":
                ins.labels = [JOIN.label if lab == H.label else lab for lab in ins.labels]

    before = {i.result for i in UL.instrs if i.result is not None}
    remove_dead(f, [i.result for i in ul_code if i.result is not None])
    after = {i.result for i in f.block(UL.label).instrs if i.result is not None}
    rep.created_values.extend(sorted(after, key=lambda n: [i.result for i in UL.instrs].index(n)))
    rep.created_values.extend(i.result for i in mid_code + join_code)
    rep.notes.append(f"removed {len(before - after)} dead clones")
    return rep


# ---------------------------------------------------------------------------
# independent compute promotion


def icp(lp: LoopInfo, f: Function) -> TransformReport:
    """Promote derived induction values that feed address computation to fresh phis.

    The promoted value gets its own ``{init, +, step}`` recurrence with init
    and step computed before the loop, so it no longer depends on the
    induction variable it was derived from.
    """
    rep = TransformReport("icp", lp, f.name)
    if not _simple_loop(lp):
        rep.notes.append("loop has no unique latch/preheader")
        return rep
    feeding = _header_phi_inputs(lp, f)
    for ins in reversed(_body_instrs(lp, f)):
        if ins.opcode not in ("add", "sub", "mul", "div", "shl") or ins.result in feeding:
            continue
        if ins.result not in f.definitions():
            continue
        ar = scev_analyze(ins.result, lp, f)
        if ar is None or not is_used_in_addr_compute(ins.result, f):
            continue
        if ins.kind == "address" and _mentions_mul_of_address(ar.init):
            continue
        k, created = _add_recurrence(f, lp, ins.result + ".iv", ins.kind, ar.init, ar.step)
        f.replace_uses(ins.result, Var(k))
        rep.created_values.extend(created)
        rep.replaced_values.append((ins.result, k))
        remove_dead(f, [ins.result])
    return rep


def _mentions_mul_of_address(e: Expr) -> bool:
    return e.op == "mul" and any(a.op == "glob" for a in e.args)


# ---------------------------------------------------------------------------
# micro-checkpoint


def micro_checkpoint(lp: LoopInfo, f: Function) -> TransformReport:
    """Spill non-constant, dead-in-loop induction-variable inits to stack slots.

    The slot is allocated in the entry block; the store and the reload that
    replaces the phi's incoming init go at the end of the preheader, outside
    the loop body.
    """
    rep = TransformReport("mck", lp, f.name)
    if not _simple_loop(lp):
        rep.notes.append("loop has no unique latch/preheader")
        return rep
    f.renumber()
    lm = compute_liveness(f)
    defs = f.definitions()
    latch_live = lm.live_in[f.block(lp.latch).terminator.id]
    for phi in loop_phis(lp, f):
        if scev_analyze(phi.result, lp, f) is None:
            continue
        n = phi.labels.index(lp.preheader) if lp.preheader in phi.labels else None
        if n is None:
            continue
        init = phi.operands[n]
        if not isinstance(init, Var):
            continue  # literal or global address: constant
        d = defs.get(init.name)
        if d is not None and d.opcode == "const":
            continue
        if init.name in latch_live:
            continue
        em_entry: list[Instr] = []
        em = _Emitter(f, em_entry)
        slot = em.emit("alloc", [], phi.result + ".ckpt", "address").name
        _insert_after_phis(f.block(f.entry), em_entry)
        pre_code: list[Instr] = []
        em = _Emitter(f, pre_code)
        pre_code.append(Instr("store", [init, Var(slot)]))
        reload = em.emit("load", [Var(slot)], phi.result + ".init", phi.kind).name
        _insert_before_terminator(f.block(lp.preheader), pre_code)
        phi.operands[n] = Var(reload)
        rep.created_values.extend([slot, reload])
        rep.replaced_values.append((init.name, reload))
        rep.checkpoint_slots.append(slot)
        f.renumber()
        lm = compute_liveness(f)
        defs = f.definitions()
        latch_live = lm.live_in[f.block(lp.latch).terminator.id]
    return rep


# ---------------------------------------------------------------------------
# pipeline


def parse_passes(spec: str) -> list[tuple[str, int | None]]:
    """``"sr,unroll:2,icp,mck"`` -> [(name, arg)], sorted into the fixed pass order."""
    out = []
    for part in (p.strip() for p in spec.split(",")):
        if not part or part == "none":
            continue
        name, _, arg = part.partition(":")
        if name not in PASS_ORDER:
            raise TransformError(f"unknown pass {name!r}")
        if name == "unroll":
            if not arg.isdigit() or int(arg) < 1:
                raise TransformError(f"unroll needs a positive factor, got {part!r}")
            out.append((name, int(arg)))
        elif arg:
            raise TransformError(f"pass {name} takes no argument")
        else:
            out.append((name, None))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise TransformError(f"duplicate pass in {spec!r}")
    return sorted(out, key=lambda p: PASS_ORDER.index(p[0]))


def format_passes(passes: list[tuple[str, int | None]]) -> str:
    return ",".join(n if a is None else f"{n}:{a}" for n, a in passes)


_PASSES = {
    "sr": strength_reduce,
    "icp": icp,
    "mck": micro_checkpoint,
}


def run_pass(m: Module, name: str, arg: int | None = None) -> list[TransformReport]:
    """Apply one pass to every loop of every function of ``m`` in place."""
    reports = []
    for f in m.functions:
        headers = [lp.header for lp in find_loops(f)]
        for header in headers:
            lp = next((l for l in find_loops(f) if l.header == header), None)
            if lp is None:
                continue
            if name == "unroll":
                rep = unroll(lp, f, arg)
            else:
                rep = _PASSES[name](lp, f)
            f.renumber()
            reports.append(rep)
    assign_debug_tags(m)
    problems = validate(m)
    if problems:
        raise TransformError(f"{name} produced invalid IR: {problems[0]}")
    return reports


def apply_passes(m: Module, passes: str | list) -> tuple[Module, list[TransformReport]]:
    """Clone ``m`` and run the given passes in the fixed order."""
    if isinstance(passes, str):
        passes = parse_passes(passes)
    else:
        passes = sorted(passes, key=lambda p: PASS_ORDER.index(p[0]))
    out = m.clone()
    reports: list[TransformReport] = []
    for name, arg in passes:
        reports.extend(run_pass(out, name, arg))
    return out, reports
