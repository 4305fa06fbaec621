"""Random small reducible CFGs in SSA form, and a path-enumeration liveness oracle."""

from __future__ import annotations

import random

from crashlab.mir import Function, Var, dominators, parse_module, validate


def random_cfg_source(rng: random.Random, max_blocks: int = 4, max_instrs: int = 12) -> str | None:
    """One candidate program; None when the drawn shape is unusable."""
    nb = rng.randint(1, max_blocks)
    labels = [f"b{k}" for k in range(nb)]
    succ: dict[str, list[str]] = {}
    for k, lab in enumerate(labels):
        if k == nb - 1:
            succ[lab] = [] if rng.random() < 0.8 or k == 0 else [labels[rng.randint(0, k)], "exit"]
            continue
        r = rng.random()
        if r < 0.35:
            succ[lab] = [labels[k + 1]]
        elif r < 0.7:
            succ[lab] = [labels[k + 1], labels[rng.randint(k + 1, nb - 1)]]
        else:
            succ[lab] = [labels[k + 1], labels[rng.randint(0, k)]]
    if any(len(s) == 2 and s[0] == s[1] for s in succ.values()):
        return None
    has_exit = any("exit" in s for s in succ.values())

    preds: dict[str, list[str]] = {lab: [] for lab in labels + ["exit"]}
    for lab, ss in succ.items():
        for s in ss:
            preds[s].append(lab)
    # dominance on the block graph, to keep every use dominated by its def
    skeleton = "fn main(%p: int64, %q: int64) {\n" + "".join(
        f"{lab}:\n  " + ("ret\n" if not ss else f"br {ss[0]}\n" if len(ss) == 1 else
                         f"condbr %p, {ss[0]}, {ss[1]}\n") for lab, ss in succ.items())
    if has_exit:
        skeleton += "exit:\n  ret\n"
    skeleton += "}\n"
    f = parse_module(skeleton).functions[0]
    dom = dominators(f)
    if any(lab not in dom for lab in labels):
        return None

    budget = max_instrs - nb - has_exit
    n = 0
    defs_in: dict[str, list[str]] = {lab: [] for lab in labels + ["exit"]}
    body: dict[str, list[str]] = {}

    def avail(lab: str) -> list[str]:
        out = ["p", "q"]
        for d in sorted(dom[lab]):
            if d != lab:
                out += defs_in[d]
        return out

    for lab in labels:
        lines = []
        ps = preds[lab]
        if len(ps) >= 2 and budget > 0 and rng.random() < 0.7:
            budget -= 1
            lines.append(("phi", f"v{n}", ps))
            defs_in[lab].append(f"v{n}")
            n += 1
        extra = rng.randint(0, min(3, max(budget, 0)))
        budget -= extra
        for _ in range(extra):
            pool = avail(lab) + defs_in[lab]
            a, b = rng.choice(pool), rng.choice(pool + ["1", "7"])
            lines.append(("bin", f"v{n}", (rng.choice(["add", "sub", "mul"]), a, b)))
            defs_in[lab].append(f"v{n}")
            n += 1
        body[lab] = lines

    out = ["fn main(%p: int64, %q: int64) -> int64 {"]
    for lab in labels:
        out.append(f"{lab}:")
        for line in body[lab]:
            if line[0] == "phi":
                incoming = []
                for pr in line[2]:
                    # value available at the end of the predecessor
                    pool = avail(pr) + defs_in[pr]
                    incoming.append(f"[%{rng.choice(pool)}, {pr}]")
                out.append(f"  %{line[1]} = phi " + ", ".join(incoming))
            else:
                op, a, b = line[2]
                fa = f"%{a}"
                fb = b if b.isdigit() else f"%{b}"
                out.append(f"  %{line[1]} = {op} {fa}, {fb}")
        pool = avail(lab) + defs_in[lab]
        ss = succ[lab]
        if not ss:
            out.append(f"  ret %{rng.choice(pool)}")
        elif len(ss) == 1:
            out.append(f"  br {ss[0]}")
        else:
            out.append(f"  condbr %{rng.choice(pool)}, {ss[0]}, {ss[1]}")
    if has_exit:
        out.append("exit:")
        out.append(f"  ret %{rng.choice(['p', 'q'])}")
    out.append("}")
    return "\n".join(out) + "\n"


def random_cfg(seed: int, max_blocks: int = 4, max_instrs: int = 12) -> Function:
    rng = random.Random(seed)
    while True:
        src = random_cfg_source(rng, max_blocks, max_instrs)
        if src is None:
            continue
        try:
            m = parse_module(src)
        except ValueError:
            continue
        if validate(m):
            continue
        f = m.functions[0]
        if len(f.blocks) <= max_blocks and sum(1 for _ in f.instructions()) <= max_instrs:
            return f


def brute_force_liveness(f: Function) -> dict[int, frozenset]:
    """Live-in per instruction by enumerating every path that enters each block at most twice.

    A value is live before an instruction when some path from there reaches a
    use of it before its definition. Phi operands are used on their incoming
    edge. Two visits per block cover every acyclic path plus one unwinding of
    each loop, which is enough to reach any point reachable at all.
    """
    blocks = {b.label: b for b in f.blocks}
    names = {p for p, _ in f.params} | {i.result for i in f.instructions() if i.result}
    result: dict[int, frozenset] = {}

    def reaches_use(v: str, label: str, pos: int, visits: dict) -> bool:
        b = blocks[label]
        for ins in b.instrs[pos:]:
            if ins.opcode != "phi" and v in ins.uses():
                return True
            if ins.result == v:
                return False
        for s in b.successors():
            for phi in blocks[s].phis():
                for op, lab in phi.incoming():
                    if lab == label and isinstance(op, Var) and op.name == v:
                        return True
            if visits.get(s, 0) >= 2:
                continue
            visits[s] = visits.get(s, 0) + 1
            found = reaches_use(v, s, 0, visits)
            visits[s] -= 1
            if found:
                return True
        return False

    for b in f.blocks:
        for pos, ins in enumerate(b.instrs):
            live = set()
            for v in names:
                if ins.opcode == "phi" and ins.result == v:
                    continue
                if reaches_use(v, b.label, pos, {b.label: 1}):
                    live.add(v)
            result[ins.id] = frozenset(live)
    return result
