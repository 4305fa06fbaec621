"""Miniature SSA IR: data model, textual format, printer and validator.

Grammar (whitespace-insensitive, ``;`` starts a line comment)::

    global NAME[COUNT] : KIND
    output NAME, NAME
    [pure] fn NAME[(%p: KIND, ...)] [-> KIND] { LABEL: INSTR* ... }

Instructions::

    %v = const 3 | 2.5
    %v = add|sub|mul|div|shl A, B
    %v = icmp eq|ne|lt|le|gt|ge A, B
    %v = phi [A, label], [B, label]
    %v = addr BASE, INDEX, SCALE, OFFSET        ; BASE + INDEX*SCALE + OFFSET
    %v = load KIND PTR
    store VALUE, PTR
    %v = alloc
    %v = call NAME(A, B)
    br label
    condbr C, label_true, label_false
    ret [A]

Any instruction may carry an explicit ``!dbg(file:line:col)`` tag.  Memory
accesses without one get a tag synthesized from their source position.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from typing import Iterator, Union

KINDS = ("int64", "float64", "address")
BINOPS = ("add", "sub", "mul", "div", "shl")
PREDICATES = ("eq", "ne", "lt", "le", "gt", "ge")
TERMINATORS = ("br", "condbr", "ret")
MEMORY_OPS = ("load", "store")
OPCODES = (
    "const", "add", "sub", "mul", "div", "shl", "icmp", "phi", "addr",
    "load", "store", "alloc", "call", "br", "condbr", "ret",
)
# name -> (argument count, result kind)
INTRINSICS = {"sqrt": (1, "float64"), "fabs": (1, "float64")}


class MirError(ValueError):
    """Raised for malformed IR (syntax, duplicate definitions, SSA violations)."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return f"%{self.name}"


@dataclass(frozen=True)
class Imm:
    value: Union[int, float]

    @property
    def kind(self) -> str:
        return "float64" if isinstance(self.value, float) else "int64"

    def __str__(self) -> str:
        return repr(self.value) if isinstance(self.value, float) else str(self.value)


@dataclass(frozen=True)
class Global:
    name: str

    def __str__(self) -> str:
        return f"@{self.name}"


Operand = Union[Var, Imm, Global]


@dataclass(frozen=True)
class DebugTag:
    file: str
    line: int
    column: int

    @property
    def key(self) -> str:
        return f"{self.file}:{self.line}:{self.column}"

    def __str__(self) -> str:
        return f"!dbg({self.key})"


@dataclass
class Instr:
    opcode: str
    operands: list = field(default_factory=list)
    result: str | None = None
    kind: str | None = None
    # phi: incoming block per operand; br/condbr: targets
    labels: list = field(default_factory=list)
    pred: str | None = None
    callee: str | None = None
    debug: DebugTag | None = None
    id: int = -1
    # tag of the instruction this one was cloned from; consumed by assign_debug_tags
    origin: DebugTag | None = field(default=None, compare=False, repr=False)

    @property
    def is_terminator(self) -> bool:
        return self.opcode in TERMINATORS

    @property
    def is_memory_access(self) -> bool:
        return self.opcode in MEMORY_OPS

    @property
    def pointer(self) -> Operand | None:
        """Address operand of a load/store."""
        if self.opcode == "load":
            return self.operands[0]
        if self.opcode == "store":
            return self.operands[1]
        return None

    def uses(self) -> list[str]:
        return [op.name for op in self.operands if isinstance(op, Var)]

    def incoming(self) -> list[tuple[Operand, str]]:
        return list(zip(self.operands, self.labels))


@dataclass
class Block:
    label: str
    instrs: list = field(default_factory=list)

    @property
    def terminator(self) -> Instr | None:
        if self.instrs and self.instrs[-1].is_terminator:
            return self.instrs[-1]
        return None

    def phis(self) -> list[Instr]:
        out = []
        for ins in self.instrs:
            if ins.opcode != "phi":
                break
            out.append(ins)
        return out

    def successors(self) -> list[str]:
        term = self.terminator
        if term is None or term.opcode == "ret":
            return []
        # condbr with identical targets is still one edge
        return list(dict.fromkeys(term.labels))


@dataclass
class Function:
    name: str
    params: list = field(default_factory=list)  # (name, kind)
    blocks: list = field(default_factory=list)
    ret_kind: str | None = None
    pure: bool = False

    @property
    def entry(self) -> str:
        return self.blocks[0].label

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def instructions(self) -> Iterator[Instr]:
        for b in self.blocks:
            yield from b.instrs

    def located(self) -> Iterator[tuple[Block, int, Instr]]:
        for b in self.blocks:
            for pos, ins in enumerate(b.instrs):
                yield b, pos, ins

    def definitions(self) -> dict[str, Instr]:
        return {i.result: i for i in self.instructions() if i.result is not None}

    def block_of(self) -> dict[str, str]:
        """Value name -> label of the defining block (params map to entry)."""
        out = {p: self.entry for p, _ in self.params}
        for b in self.blocks:
            for ins in b.instrs:
                if ins.result is not None:
                    out[ins.result] = b.label
        return out

    def users(self) -> dict[str, list[Instr]]:
        out: dict[str, list[Instr]] = {}
        for ins in self.instructions():
            for name in ins.uses():
                out.setdefault(name, []).append(ins)
        return out

    def predecessors(self) -> dict[str, list[str]]:
        preds: dict[str, list[str]] = {b.label: [] for b in self.blocks}
        for b in self.blocks:
            for s in b.successors():
                if s in preds:
                    preds[s].append(b.label)
        return preds

    def value_kinds(self) -> dict[str, str]:
        out = dict(self.params)
        for ins in self.instructions():
            if ins.result is not None and ins.kind is not None:
                out[ins.result] = ins.kind
        return out

    def renumber(self) -> None:
        for n, ins in enumerate(self.instructions()):
            ins.id = n

    def instr(self, iid: int) -> Instr:
        for ins in self.instructions():
            if ins.id == iid:
                return ins
        raise KeyError(iid)

    def fresh(self, stem: str) -> str:
        taken = {p for p, _ in self.params} | set(self.definitions())
        if stem not in taken:
            return stem
        n = 1
        while f"{stem}.{n}" in taken:
            n += 1
        return f"{stem}.{n}"

    def replace_uses(self, old: str, new: Operand) -> int:
        count = 0
        for ins in self.instructions():
            for n, op in enumerate(ins.operands):
                if isinstance(op, Var) and op.name == old:
                    ins.operands[n] = new
                    count += 1
        return count

    def remove(self, target: Instr) -> None:
        for b in self.blocks:
            for n, ins in enumerate(b.instrs):
                if ins is target:
                    del b.instrs[n]
                    return
        raise KeyError(target.result)


@dataclass(frozen=True)
class GlobalDecl:
    name: str
    count: int
    kind: str


@dataclass
class Module:
    functions: list = field(default_factory=list)
    globals: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    source: str = "<mir>"

    def function(self, name: str) -> Function:
        for f in self.functions:
            if f.name == name:
                return f
        raise KeyError(name)

    def global_decl(self, name: str) -> GlobalDecl:
        for g in self.globals:
            if g.name == name:
                return g
        raise KeyError(name)

    def clone(self) -> "Module":
        return copy.deepcopy(self)

    def structure(self) -> tuple:
        """Hashable structural summary; ignores the source name."""
        def ins_t(i: Instr):
            return (i.id, i.opcode, tuple(i.operands), i.result, i.kind,
                    tuple(i.labels), i.pred, i.callee, i.debug)
        return (
            tuple(self.globals), tuple(self.outputs),
            tuple((f.name, tuple(f.params), f.ret_kind, f.pure,
                   tuple((b.label, tuple(ins_t(i) for i in b.instrs)) for b in f.blocks))
                  for f in self.functions),
        )


# ---------------------------------------------------------------------------
# Tokenizer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<nl>\n)
    |(?P<ws>[ \t\r]+)
    |(?P<comment>;[^\n]*)
    |(?P<dbg>!dbg\((?P<dbgbody>[^)]*)\))
    |(?P<var>%[\w.]+)
    |(?P<glob>@[A-Za-z_][\w.]*)
    |(?P<num>[-+]?(?:0x[0-9a-fA-F]+|\d+\.\d*(?:[eE][-+]?\d+)?|\d+[eE][-+]?\d+|\d+|inf))
    |(?P<arrow>->)
    |(?P<ident>[A-Za-z_][\w.]*)
    |(?P<punct>[{}()\[\],:=])
    """,
    re.VERBOSE,
)


@dataclass
class _Tok:
    type: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise MirError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "dbgbody":
            kind = "dbg"
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(0), line, col))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


def _number(text: str) -> int | float:
    t = text.lower()
    if "0x" in t:
        return int(t, 16)
    if any(c in t for c in ".e") or "inf" in t:
        return float(t)
    return int(t)


class _Parser:
    def __init__(self, text: str, source: str):
        self.toks = _tokenize(text)
        self.pos = 0
        self.source = source

    @property
    def tok(self) -> _Tok:
        return self.toks[self.pos]

    def peek(self, n: int = 1) -> _Tok:
        return self.toks[min(self.pos + n, len(self.toks) - 1)]

    def error(self, msg: str, tok: _Tok | None = None) -> MirError:
        tok = tok or self.tok
        return MirError(msg, tok.line, tok.col)

    def next(self) -> _Tok:
        t = self.tok
        self.pos += 1
        return t

    def expect(self, type_: str, text: str | None = None) -> _Tok:
        t = self.tok
        if t.type != type_ or (text is not None and t.text != text):
            want = text or type_
            raise self.error(f"expected {want!r}, found {t.text or 'end of input'!r}")
        return self.next()

    def accept(self, type_: str, text: str | None = None) -> _Tok | None:
        t = self.tok
        if t.type == type_ and (text is None or t.text == text):
            return self.next()
        return None

    def kind(self) -> str:
        t = self.expect("ident")
        if t.text not in KINDS:
            raise self.error(f"unknown kind {t.text!r}", t)
        return t.text

    def operand(self) -> Operand:
        t = self.tok
        if t.type == "var":
            self.next()
            return Var(t.text[1:])
        if t.type == "glob":
            self.next()
            return Global(t.text[1:])
        if t.type == "num":
            self.next()
            return Imm(_number(t.text))
        raise self.error(f"expected operand, found {t.text or 'end of input'!r}")

    def module(self) -> Module:
        m = Module(source=self.source)
        while self.tok.type != "eof":
            t = self.tok
            if t.type == "ident" and t.text == "global":
                self.next()
                name = self.expect("ident").text
                self.expect("punct", "[")
                count = _number(self.expect("num").text)
                self.expect("punct", "]")
                self.expect("punct", ":")
                kind = self.kind()
                if any(g.name == name for g in m.globals):
                    raise self.error(f"duplicate definition of global @{name}", t)
                m.globals.append(GlobalDecl(name, int(count), kind))
            elif t.type == "ident" and t.text == "output":
                self.next()
                m.outputs.append(self.expect("ident").text)
                while self.accept("punct", ","):
                    m.outputs.append(self.expect("ident").text)
            elif t.type == "ident" and t.text in ("fn", "pure"):
                f = self.function()
                if any(g.name == f.name for g in m.functions):
                    raise self.error(f"duplicate definition of function {f.name}", t)
                m.functions.append(f)
            else:
                raise self.error(f"unexpected {t.text!r} at top level")
        return m

    def function(self) -> Function:
        pure = bool(self.accept("ident", "pure"))
        self.expect("ident", "fn")
        f = Function(self.expect("ident").text, pure=pure)
        if self.accept("punct", "("):
            if not self.accept("punct", ")"):
                while True:
                    name = self.expect("var").text[1:]
                    self.expect("punct", ":")
                    f.params.append((name, self.kind()))
                    if self.accept("punct", ")"):
                        break
                    self.expect("punct", ",")
        if self.accept("arrow"):
            f.ret_kind = self.kind()
        self.expect("punct", "{")
        while not self.accept("punct", "}"):
            lab = self.expect("ident")
            self.expect("punct", ":")
            if any(b.label == lab.text for b in f.blocks):
                raise self.error(f"duplicate block label {lab.text!r}", lab)
            block = Block(lab.text)
            f.blocks.append(block)
            while not (self.tok.type == "punct" and self.tok.text == "}") and not (
                self.tok.type == "ident" and self.peek().type == "punct" and self.peek().text == ":"
            ):
                if self.tok.type == "eof":
                    raise self.error("unterminated function body")
                block.instrs.append(self.instr())
        if not f.blocks:
            raise self.error(f"function {f.name} has no blocks")
        return f

    def instr(self) -> Instr:
        start = self.tok
        result = None
        if start.type == "var":
            result = self.next().text[1:]
            self.expect("punct", "=")
        op_tok = self.expect("ident")
        op = op_tok.text
        if op not in OPCODES:
            raise self.error(f"unknown opcode {op!r}", op_tok)
        ins = Instr(op, result=result)
        if op == "const":
            t = self.expect("num")
            ins.operands = [Imm(_number(t.text))]
        elif op in BINOPS:
            ins.operands = [self.operand()]
            self.expect("punct", ",")
            ins.operands.append(self.operand())
        elif op == "icmp":
            p = self.expect("ident")
            if p.text not in PREDICATES:
                raise self.error(f"unknown predicate {p.text!r}", p)
            ins.pred = p.text
            ins.operands = [self.operand()]
            self.expect("punct", ",")
            ins.operands.append(self.operand())
        elif op == "phi":
            while True:
                self.expect("punct", "[")
                ins.operands.append(self.operand())
                self.expect("punct", ",")
                ins.labels.append(self.expect("ident").text)
                self.expect("punct", "]")
                if not self.accept("punct", ","):
                    break
        elif op == "addr":
            ins.operands = [self.operand()]
            for _ in range(3):
                self.expect("punct", ",")
                ins.operands.append(self.operand())
        elif op == "load":
            ins.kind = self.kind()
            ins.operands = [self.operand()]
        elif op == "store":
            ins.operands = [self.operand()]
            self.expect("punct", ",")
            ins.operands.append(self.operand())
        elif op == "alloc":
            pass
        elif op == "call":
            ins.callee = self.expect("ident").text
            self.expect("punct", "(")
            if not self.accept("punct", ")"):
                while True:
                    ins.operands.append(self.operand())
                    if self.accept("punct", ")"):
                        break
                    self.expect("punct", ",")
        elif op == "br":
            ins.labels = [self.expect("ident").text]
        elif op == "condbr":
            ins.operands = [self.operand()]
            self.expect("punct", ",")
            ins.labels.append(self.expect("ident").text)
            self.expect("punct", ",")
            ins.labels.append(self.expect("ident").text)
        elif op == "ret":
            if self.tok.type in ("var", "glob", "num"):
                ins.operands = [self.operand()]
        needs_result = op not in ("store", "br", "condbr", "ret")
        if needs_result and result is None:
            raise self.error(f"{op} requires a result value", op_tok)
        if not needs_result and result is not None:
            raise self.error(f"{op} produces no value", start)
        dbg = self.accept("dbg")
        if dbg is not None:
            ins.debug = _parse_dbg(dbg.text[5:-1], self, dbg)
        elif ins.is_memory_access:
            ins.debug = DebugTag(self.source, start.line, start.col)
        return ins


def _parse_dbg(body: str, parser: _Parser, tok: _Tok) -> DebugTag:
    parts = body.rsplit(":", 2)
    if len(parts) != 3 or not parts[1].isdigit() or not parts[2].isdigit():
        raise parser.error(f"malformed debug tag {body!r}", tok)
    return DebugTag(parts[0], int(parts[1]), int(parts[2]))


def parse_module(text: str, source: str = "<mir>") -> Module:
    """Parse IR text into a Module with dense ids and inferred value kinds.

    Raises MirError on syntax errors, duplicate definitions, unknown opcodes
    and SSA violations (undefined or non-dominating uses).
    """
    m = _Parser(text, source).module()
    for f in m.functions:
        seen = {p for p, _ in f.params}
        if len(seen) != len(f.params):
            raise MirError(f"duplicate definition of a parameter in {f.name}")
        for ins in f.instructions():
            if ins.result is None:
                continue
            if ins.result in seen:
                raise MirError(f"duplicate definition of %{ins.result} in {f.name}")
            seen.add(ins.result)
        f.renumber()
    infer_kinds(m)
    ssa = [v for v in validate(m) if v.reason.startswith("SSA violation")]
    if ssa:
        raise MirError(str(ssa[0]))
    return m


def infer_kinds(m: Module) -> None:
    """Fill in result kinds; iterates to a fixpoint because phis can be cyclic."""
    for f in m.functions:
        while True:
            changed = True
            while changed:
                changed = False
                kinds = f.value_kinds()
                for ins in f.instructions():
                    if ins.result is None or ins.kind is not None:
                        continue
                    k = _result_kind(ins, kinds, m)
                    if k is not None:
                        ins.kind = k
                        changed = True
            # a phi cycle seeded only by literals takes the literal's kind
            seed = next((i for i in f.instructions() if i.opcode == "phi" and i.kind is None
                         and any(isinstance(o, Imm) for o in i.operands)), None)
            if seed is None:
                break
            seed.kind = next(o.kind for o in seed.operands if isinstance(o, Imm))


def _operand_kind(op: Operand, kinds: dict[str, str]) -> str | None:
    if isinstance(op, Imm):
        return op.kind
    if isinstance(op, Global):
        return "address"
    return kinds.get(op.name)


def _result_kind(ins: Instr, kinds: dict[str, str], m: Module) -> str | None:
    op = ins.opcode
    ks = [_operand_kind(o, kinds) for o in ins.operands]
    if op == "const":
        return ks[0]
    if op in ("icmp",):
        return "int64"
    if op in ("addr", "alloc"):
        return "address"
    if op == "phi":
        for o, k in zip(ins.operands, ks):
            if not isinstance(o, Imm) and k is not None:
                return k
        return None
    if op in BINOPS:
        if None in ks:
            return None
        if "address" in ks:
            return "address"
        if "float64" in ks:
            return "float64"
        return "int64"
    if op == "call":
        if ins.callee in INTRINSICS:
            return INTRINSICS[ins.callee][1]
        try:
            return m.function(ins.callee).ret_kind
        except KeyError:
            return None
    return None


# ---------------------------------------------------------------------------
# Printer


def format_instr(ins: Instr) -> str:
    op = ins.opcode
    ops = ins.operands
    if op == "const":
        body = f"const {ops[0]}"
    elif op in BINOPS:
        body = f"{op} {ops[0]}, {ops[1]}"
    elif op == "icmp":
        body = f"icmp {ins.pred} {ops[0]}, {ops[1]}"
    elif op == "phi":
        body = "phi " + ", ".join(f"[{o}, {lab}]" for o, lab in zip(ops, ins.labels))
    elif op == "addr":
        body = "addr " + ", ".join(str(o) for o in ops)
    elif op == "load":
        body = f"load {ins.kind} {ops[0]}"
    elif op == "store":
        body = f"store {ops[0]}, {ops[1]}"
    elif op == "alloc":
        body = "alloc"
    elif op == "call":
        body = f"call {ins.callee}(" + ", ".join(str(o) for o in ops) + ")"
    elif op == "br":
        body = f"br {ins.labels[0]}"
    elif op == "condbr":
        body = f"condbr {ops[0]}, {ins.labels[0]}, {ins.labels[1]}"
    else:
        body = "ret" + (f" {ops[0]}" if ops else "")
    text = f"%{ins.result} = {body}" if ins.result is not None else body
    if ins.debug is not None:
        text += f" {ins.debug}"
    return text


def print_function(f: Function) -> str:
    head = "pure fn " if f.pure else "fn "
    head += f.name
    if f.params:
        head += "(" + ", ".join(f"%{n}: {k}" for n, k in f.params) + ")"
    if f.ret_kind:
        head += f" -> {f.ret_kind}"
    lines = [head + " {"]
    for b in f.blocks:
        lines.append(f"{b.label}:")
        lines.extend(f"  {format_instr(i)}" for i in b.instrs)
    lines.append("}")
    return "\n".join(lines)


def print_module(m: Module) -> str:
    parts = []
    head = [f"global {g.name}[{g.count}] : {g.kind}" for g in m.globals]
    if m.outputs:
        head.append("output " + ", ".join(m.outputs))
    if head:
        parts.append("\n".join(head))
    parts.extend(print_function(f) for f in m.functions)
    return "\n\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    function: str
    block: str | None
    instr: int | None
    reason: str

    def __str__(self) -> str:
        where = self.function
        if self.block is not None:
            where += f":{self.block}"
        if self.instr is not None:
            where += f"#{self.instr}"
        return f"{where}: {self.reason}"


def dominators(f: Function) -> dict[str, set[str]]:
    """Block -> set of blocks dominating it (reachable blocks only)."""
    succ = {b.label: b.successors() for b in f.blocks}
    reach, stack = set(), [f.entry]
    while stack:
        b = stack.pop()
        if b in reach or b not in succ:
            continue
        reach.add(b)
        stack.extend(succ[b])
    preds = {b: [p for p in reach if b in succ[p]] for b in reach}
    order = [b.label for b in f.blocks if b.label in reach]
    dom = {b: set(reach) for b in reach}
    dom[f.entry] = {f.entry}
    changed = True
    while changed:
        changed = False
        for b in order:
            if b == f.entry:
                continue
            ps = [dom[p] for p in preds[b]]
            new = set.intersection(*ps) if ps else set()
            new = new | {b}
            if new != dom[b]:
                dom[b] = new
                changed = True
    return dom


def _is_reducible(f: Function, dom: dict[str, set[str]]) -> bool:
    # Every retreating edge in a DFS must be a back edge (target dominates source).
    succ = {b.label: b.successors() for b in f.blocks}
    state: dict[str, int] = {}
    ok = True

    def dfs(b: str) -> None:
        nonlocal ok
        state[b] = 1
        for s in succ.get(b, []):
            if s not in succ:
                continue
            if state.get(s) == 1 and s not in dom.get(b, {s}):
                ok = False
            elif s not in state:
                dfs(s)
        state[b] = 2

    dfs(f.entry)
    return ok


def validate(m: Module) -> list[Violation]:
    out: list[Violation] = []
    names = [f.name for f in m.functions]
    for n in sorted({n for n in names if names.count(n) > 1}):
        out.append(Violation(n, None, None, "duplicate function name"))
    gnames = [g.name for g in m.globals]
    for n in sorted({n for n in gnames if gnames.count(n) > 1}):
        out.append(Violation("<module>", None, None, f"duplicate global @{n}"))
    for g in m.globals:
        if g.kind not in KINDS or g.count <= 0:
            out.append(Violation("<module>", None, None, f"bad global declaration @{g.name}"))
    for o in m.outputs:
        if o not in gnames:
            out.append(Violation("<module>", None, None, f"output {o} is not a global"))
    tags: dict[DebugTag, str] = {}
    for f in m.functions:
        out.extend(_validate_function(f, m, set(gnames)))
        for ins in f.instructions():
            if ins.is_memory_access:
                if ins.debug is None:
                    out.append(Violation(f.name, None, ins.id, "memory access without debug tag"))
                elif ins.debug in tags:
                    out.append(Violation(f.name, None, ins.id, f"duplicate debug tag {ins.debug.key}"))
                else:
                    tags[ins.debug] = f.name
    return out


def _validate_function(f: Function, m: Module, gnames: set[str]) -> list[Violation]:
    out: list[Violation] = []
    labels = {b.label for b in f.blocks}

    def bad(block, ins, reason):
        out.append(Violation(f.name, block, None if ins is None else ins.id, reason))

    ids = [i.id for i in f.instructions()]
    if ids != list(range(len(ids))):
        bad(None, None, "instruction ids are not dense")

    for b in f.blocks:
        terms = [i for i in b.instrs if i.is_terminator]
        if len(terms) != 1:
            bad(b.label, None, f"block {b.label} has {len(terms)} terminators")
        elif not b.instrs[-1].is_terminator:
            bad(b.label, terms[0], f"block {b.label} does not end with its terminator")
        for t in terms:
            for lab in t.labels:
                if lab not in labels:
                    bad(b.label, t, f"branch to unknown block {lab!r}")
        seen_non_phi = False
        for ins in b.instrs:
            if ins.opcode == "phi" and seen_non_phi:
                bad(b.label, ins, "phi after non-phi instruction")
            seen_non_phi |= ins.opcode != "phi"
    if out:
        return out

    dom = dominators(f)
    if not _is_reducible(f, dom):
        bad(None, None, "irreducible control flow")
    preds = f.predecessors()
    defblock = f.block_of()
    position = {}
    for b in f.blocks:
        for pos, ins in enumerate(b.instrs):
            if ins.result is not None:
                position[ins.result] = pos
    params = {p for p, _ in f.params}
    kinds = f.value_kinds()

    def dominates_at(name: str, block: str, pos: int) -> bool:
        if name in params:
            return True
        db = defblock[name]
        if block not in dom:
            return True  # unreachable code is not checked
        if db == block:
            return position[name] < pos
        return db in dom[block]

    for b in f.blocks:
        for pos, ins in enumerate(b.instrs):
            if ins.opcode == "phi":
                if sorted(ins.labels) != sorted(preds[b.label]) or len(ins.operands) != len(preds[b.label]):
                    bad(b.label, ins, f"phi has {len(ins.operands)} incoming values for "
                                      f"{len(preds[b.label])} predecessors")
                for op, lab in ins.incoming():
                    if isinstance(op, Var):
                        if op.name not in defblock:
                            bad(b.label, ins, f"SSA violation: %{op.name} is not defined")
                        elif lab in labels and not dominates_at(op.name, lab, len(f.block(lab).instrs)):
                            bad(b.label, ins, f"SSA violation: %{op.name} does not dominate edge from {lab}")
            else:
                for name in ins.uses():
                    if name not in defblock:
                        bad(b.label, ins, f"SSA violation: %{name} is not defined")
                    elif not dominates_at(name, b.label, pos):
                        bad(b.label, ins, f"SSA violation: use of %{name} before its definition")
            for g in (o for o in ins.operands if isinstance(o, Global)):
                if g.name not in gnames:
                    bad(b.label, ins, f"unknown global @{g.name}")
            out.extend(_check_kinds(f, b.label, ins, kinds, m))
    return out


def _check_kinds(f: Function, label: str, ins: Instr, kinds: dict[str, str], m: Module) -> list[Violation]:
    def v(reason):
        return [Violation(f.name, label, ins.id, reason)]

    ks = [_operand_kind(o, kinds) for o in ins.operands]
    op = ins.opcode
    if ins.result is not None and ins.kind is None:
        return v(f"cannot infer kind of %{ins.result}")
    if op in BINOPS:
        nonimm = {k for k, o in zip(ks, ins.operands) if not isinstance(o, Imm)}
        if op == "shl" and ins.kind != "int64":
            return v("shl requires int64 operands")
        if "float64" in nonimm and "address" in nonimm:
            return v("mixed float64/address arithmetic")
        if ins.kind == "address" and op not in ("add", "sub"):
            return v(f"{op} on address operands")
    elif op == "icmp":
        if len(set(k for k, o in zip(ks, ins.operands) if not isinstance(o, Imm))) > 1:
            return v("icmp operands differ in kind")
    elif op == "phi":
        for k, o in zip(ks, ins.operands):
            if k is None or k == ins.kind:
                continue
            # integer literals are accepted for any phi kind
            if isinstance(o, Imm) and o.kind == "int64":
                continue
            return v(f"phi operand kind {k} does not match {ins.kind}")
    elif op == "addr":
        if ks[0] not in ("address", "int64"):
            return v("addr base must be address or int64")
        if any(k != "int64" for k in ks[1:]):
            return v("addr index/scale/offset must be int64")
    elif op in MEMORY_OPS:
        ptr_kind = ks[0] if op == "load" else ks[1]
        if ptr_kind != "address":
            return v(f"{op} requires an address-kind pointer operand")
        if op == "store" and ks[0] == "address" and not isinstance(ins.operands[0], Var):
            return v("store value must not be a global")
    elif op == "call":
        if ins.callee in INTRINSICS:
            if len(ins.operands) != INTRINSICS[ins.callee][0]:
                return v(f"wrong argument count for {ins.callee}")
        else:
            try:
                callee = m.function(ins.callee)
            except KeyError:
                return v(f"call to unknown function {ins.callee}")
            if not callee.pure:
                return v(f"call to non-pure function {ins.callee}")
            if len(callee.params) != len(ins.operands):
                return v(f"wrong argument count for {ins.callee}")
    elif op == "condbr":
        if ks[0] != "int64":
            return v("condbr condition must be int64")
    elif op == "ret":
        if f.ret_kind is not None and (not ins.operands or
                                       (ks[0] != f.ret_kind and not isinstance(ins.operands[0], Imm))):
            return v(f"ret kind does not match {f.ret_kind}")
    return []


def memory_accesses(m: Module) -> Iterator[tuple[Function, Instr]]:
    for f in m.functions:
        for ins in f.instructions():
            if ins.is_memory_access:
                yield f, ins


def assign_debug_tags(m: Module) -> None:
    """Give every memory access lacking a tag (or sharing one) a fresh unique tag."""
    used: set[DebugTag] = set()
    pending = []
    for f, ins in memory_accesses(m):
        if ins.debug is None or ins.debug in used:
            pending.append(ins)
        else:
            used.add(ins.debug)
    for ins in pending:
        base = ins.debug or ins.origin or DebugTag(m.source, 1, 1)
        ins.origin = None
        col = base.column
        while DebugTag(base.file, base.line, col) in used:
            col += 1
        ins.debug = DebugTag(base.file, base.line, col)
        used.add(ins.debug)
