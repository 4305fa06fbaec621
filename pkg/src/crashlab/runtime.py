"""Trap-time recovery: replay the faulting access's kernel and patch the machine state.

The handler is dormant until the VM reports an InvalidAccess trap. It then
looks up the kernel by the access's debug key, reads the kernel parameters
through a liveness-gated snapshot, and replays the kernel. If the replayed
address equals the faulting one, the inputs themselves are corrupt; the
handler then tries to rebuild a corrupted induction variable from a partner
before giving up.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .builder import IVPair, RecoveryBundle, eval_expr
from .vm import (
    INVALID_ACCESS, MASK64, UNAVAILABLE, LiveState, MachineState, TrapRecord,
    call_function, snapshot_live_state, wrap_int,
)

PATCHED = "Patched"
IV_REPAIRED = "IVRepaired"
ABORTED = "Aborted"

NO_KERNEL = "NoKernel"
MISSING_PARAM = "MissingParam"
INCONCLUSIVE = "Inconclusive"
RETRY_EXHAUSTED = "RetryExhausted"

MAX_ATTEMPTS = 2


@dataclass
class RecoveryAction:
    decision: str
    address: int | None = None
    reason: str = ""
    repaired: tuple | None = None  # (value, old, new)
    attempts: int = 1
    elapsed: float | None = None
    key: str = ""
    params_read: int = 0
    instructions: int = 0
    site: tuple | None = None  # (function, instr id, occurrence)

    @property
    def ok(self) -> bool:
        return self.decision != ABORTED

    def log_line(self, plan_id: int | str = "-") -> str:
        iv = "-" if self.repaired is None else f"{self.repaired[0]}:{self.repaired[1]}->{self.repaired[2]}"
        us = "-" if self.elapsed is None else f"{self.elapsed * 1e6:.0f}"
        decision = self.decision if self.decision != ABORTED else f"{ABORTED}({self.reason})"
        return (f"plan_id={plan_id} key={self.key or '-'} decision={decision} attempts={self.attempts} "
                f"elapsed_us={us} params_read={self.params_read} iv_repaired={iv}")


def _wrap(value: int, kind: str) -> int:
    return value & MASK64 if kind == "address" else wrap_int(value)


def recover_iv(pair: IVPair, ls: LiveState, target: str) -> int | None:
    """Rebuild ``target`` from its partner: (p - p0) / s_p * s_t + t0, exact division only."""
    partner = pair.partner(target)
    pv = ls.read(partner)
    if pv is UNAVAILABLE or not isinstance(pv, int):
        return None
    p0 = eval_expr(pair.init(partner), ls.read)
    sp = eval_expr(pair.step(partner), ls.read)
    t0 = eval_expr(pair.init(target), ls.read)
    st = eval_expr(pair.step(target), ls.read)
    if None in (p0, sp, t0, st) or sp == 0:
        return None
    diff = wrap_int(pv - p0)
    sp = wrap_int(sp)
    if diff % sp:
        return None  # inexact: the partner itself is suspect
    return (diff // sp) * st + t0


def replay(bundle: RecoveryBundle, symbol: str, args: list) -> tuple[int, int]:
    value, executed = call_function(bundle.module, symbol, args)
    return value & MASK64, executed


def handle_trap(t: TrapRecord, bundle: RecoveryBundle, ls: LiveState, key: str | None,
                iv_repair: bool = True) -> RecoveryAction:
    """Decide how to recover from one InvalidAccess trap. Never raises."""
    kernel = bundle.kernels.get(key) if key else None
    if kernel is None:
        return RecoveryAction(ABORTED, reason=NO_KERNEL, key=key or "")
    values = []
    for p in kernel.params:
        v = ls.read(p.name)
        if v is UNAVAILABLE:
            return RecoveryAction(ABORTED, reason=MISSING_PARAM, key=key, params_read=ls.reads)
        values.append(v)
    executed = 0
    try:
        addr, n = replay(bundle, kernel.symbol, values)
    except Exception as exc:  # a tainted input can make the kernel itself fault
        return RecoveryAction(ABORTED, reason=f"{INCONCLUSIVE}: replay failed ({exc})", key=key,
                              params_read=ls.reads)
    executed += n
    if addr != t.address:
        return RecoveryAction(PATCHED, addr, key=key, params_read=ls.reads, instructions=executed)
    if iv_repair:
        index = {p.name: n for n, p in enumerate(kernel.params)}
        for pair in kernel.iv_repairs:
            for target in pair.members():
                if target not in index:
                    continue
                new = recover_iv(pair, ls, target)
                if new is None:
                    continue
                pos = index[target]
                new = _wrap(new, kernel.params[pos].kind)
                old = values[pos]
                if new == old:
                    continue
                trial = list(values)
                trial[pos] = new
                try:
                    addr2, n = replay(bundle, kernel.symbol, trial)
                except Exception:
                    continue
                executed += n
                if addr2 != t.address:
                    return RecoveryAction(IV_REPAIRED, addr2, repaired=(target, old, new), key=key,
                                          params_read=ls.reads, instructions=executed)
    return RecoveryAction(ABORTED, reason=INCONCLUSIVE, key=key, params_read=ls.reads,
                          instructions=executed)


def resume(s: MachineState, t: TrapRecord, action: RecoveryAction) -> None:
    """Overwrite the faulting access's address operand (and any repaired IV)."""
    if not action.ok:
        raise ValueError("cannot resume from an aborted recovery")
    fr = s.frame
    ins = fr.function.block(t.block).instrs[t.pos]
    ptr = ins.pointer
    if action.repaired is not None:
        name, _, new = action.repaired
        fr.env[name] = new
    fr.env[ptr.name] = action.address


class RecoveryRuntime:
    """VM recovery hook. Loads the bundle only when a trap arrives."""

    def __init__(self, loader: Callable[[], RecoveryBundle], iv_repair: bool = True,
                 timing: bool = False, max_attempts: int = MAX_ATTEMPTS):
        self._loader = loader
        self.iv_repair = iv_repair
        self.timing = timing
        self.max_attempts = max_attempts
        self.log: list[RecoveryAction] = []
        self.instructions_executed = 0
        self.allocations = 0
        self._attempts: dict[tuple, int] = {}

    def on_trap(self, trap: TrapRecord, state: MachineState) -> bool:
        if trap.kind != INVALID_ACCESS:
            return False
        start = time.perf_counter() if self.timing else None
        fr = state.frame
        ins = fr.function.block(trap.block).instrs[trap.pos]
        site = (trap.function, trap.instr, state.counts.get((trap.function, trap.instr), 0) + 1)
        attempts = self._attempts.get(site, 0) + 1
        self._attempts[site] = attempts
        key = ins.debug.key if ins.debug is not None else None
        if attempts > self.max_attempts:
            action = RecoveryAction(ABORTED, reason=RETRY_EXHAUSTED, key=key or "", attempts=attempts)
        else:
            bundle = self._loader()
            self.allocations += 1
            ls = snapshot_live_state(trap, bundle.liveness[trap.function], state)
            action = handle_trap(trap, bundle, ls, key, self.iv_repair)
            action.attempts = attempts
            self.instructions_executed += action.instructions
            del bundle  # released after each recovery
        action.site = site
        if start is not None:
            action.elapsed = time.perf_counter() - start
        self.log.append(action)
        if not action.ok:
            return False
        resume(state, trap, action)
        return True

