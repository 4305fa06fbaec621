from __future__ import annotations

from hypothesis import given, strategies as st

from crashlab.analysis import Expr
from crashlab.builder import IVPair, build_bundle
from crashlab.injector import InjectionPlan
from crashlab.kernels import get_kernel
from crashlab.mir import Block, Imm, Instr
from crashlab.runtime import (
    ABORTED, INCONCLUSIVE, IV_REPAIRED, NO_KERNEL, PATCHED, RETRY_EXHAUSTED, RecoveryRuntime,
    handle_trap, recover_iv,
)
from crashlab.transforms import apply_passes
from crashlab.vm import COMPLETED, TRAPPED, UNAVAILABLE, RunConfig, TrapRecord, run


class FakeLive:
    def __init__(self, **values):
        self.values = values
        self.reads = 0

    def read(self, name):
        self.reads += 1
        return self.values.get(name, UNAVAILABLE)


def _pair(i0, si, k0, sk):
    return IVPair("i", "k", Expr.const(i0), Expr.const(k0), si if isinstance(si, Expr) else Expr.const(si),
                  sk if isinstance(sk, Expr) else Expr.const(sk), loop=None)


def test_recover_from_scaled_partner():
    p = IVPair("i", "k", Expr.const(0), Expr.const(0), Expr.const(1), Expr.val("c"), loop=None)
    assert recover_iv(p, FakeLive(k=7 * 12, c=12), "i") == 7


def test_zero_iterations_gives_init():
    assert recover_iv(_pair(5, 3, 40, 2), FakeLive(k=40), "i") == 5


def test_offset_inits_and_steps():
    # i0=3, s_i=2, k0=100, s_k=4, k=128 -> seven iterations -> i = 17
    assert recover_iv(_pair(3, 2, 100, 4), FakeLive(k=128), "i") == 17
    assert recover_iv(_pair(3, 2, 100, 4), FakeLive(i=17), "k") == 128


def test_inexact_division_refuses():
    assert recover_iv(_pair(0, 1, 0, 4), FakeLive(k=10), "i") is None
    assert recover_iv(_pair(0, 1, 0, 4), FakeLive(), "i") is None


@given(st.integers(-1000, 1000), st.integers(-9, 9).filter(bool), st.integers(-1000, 1000),
       st.integers(-9, 9).filter(bool), st.integers(0, 64))
def test_partner_formula_round_trip(i0, si, k0, sk, n):
    p = _pair(i0, si, k0, sk)
    i, k = i0 + n * si, k0 + n * sk
    assert recover_iv(p, FakeLive(k=k), "i") == i
    assert recover_iv(p, FakeLive(i=i), "k") == k


def _campaign_run(m, inputs, plan, iv_repair=True, loader=None):
    bundle = build_bundle(m)
    rt = RecoveryRuntime(loader or (lambda: bundle), iv_repair=iv_repair)
    golden = run(m, inputs, RunConfig(record_accesses=True))
    res = run(m, inputs, RunConfig(injection=plan, recovery=rt, step_budget=10 * golden.dyn_count))
    return golden, res, rt


def test_corrupted_index_arithmetic_is_patched_to_golden_address():
    spec = get_kernel("gather2d")
    m = spec.module()
    t2 = next(i for i in m.functions[0].instructions() if i.result == "t2")
    golden, res, rt = _campaign_run(m, spec.reference_input(), InjectionPlan(t2.id, 4, 41))
    (action,) = rt.log
    assert action.decision == PATCHED
    assert action.address == golden.accesses[action.site]
    assert res.status == COMPLETED and res.same_output(golden)


def test_corrupted_iv_repaired_from_partner():
    spec = get_kernel("saxpy_unrolled")
    m, _ = apply_passes(spec.module(), "icp")
    phi = next(i for i in m.functions[0].instructions() if i.result == "i")
    golden, res, rt = _campaign_run(m, spec.reference_input(), InjectionPlan(phi.id, 3, 40))
    action = rt.log[0]
    assert action.decision == IV_REPAIRED
    assert action.repaired == ("i", 4 ^ (1 << 40), 4)
    assert res.status == COMPLETED and res.same_output(golden)


def test_without_iv_repair_the_same_fault_is_inconclusive():
    spec = get_kernel("saxpy_unrolled")
    m, _ = apply_passes(spec.module(), "icp")
    phi = next(i for i in m.functions[0].instructions() if i.result == "i")
    _, res, rt = _campaign_run(m, spec.reference_input(), InjectionPlan(phi.id, 3, 40), iv_repair=False)
    assert rt.log[0].decision == ABORTED and rt.log[0].reason == INCONCLUSIVE
    assert res.status == TRAPPED


def test_missing_table_entry():
    bundle = build_bundle(get_kernel("saxpy").module())
    trap = TrapRecord("InvalidAccess", "main", "loop", 2, 2, 1 << 50, 10)
    action = handle_trap(trap, bundle, FakeLive(), "nowhere.mir:1:1")
    assert (action.decision, action.reason) == (ABORTED, NO_KERNEL)


def test_persistent_corruption_recovered_at_every_manifestation():
    spec = get_kernel("gather2d")
    m = spec.module()
    wtp = next(i for i in m.functions[0].instructions() if i.result == "wtp")
    golden, res, rt = _campaign_run(m, spec.reference_input(), InjectionPlan(wtp.id, 1, 44))
    inputs = spec.reference_input()
    assert len(rt.log) == inputs["ni"] * inputs["nm"]
    assert all(a.decision == PATCHED for a in rt.log)
    assert res.status == COMPLETED and res.same_output(golden)


def test_retry_bound():
    spec = get_kernel("saxpy")
    m = spec.module()
    loads = []

    def loader():
        # each load "repairs" to a different address that is still invalid
        bundle = build_bundle(m)
        loads.append(1)
        for f in bundle.module.functions:
            f.blocks = [Block("entry", [Instr("ret", [Imm(8 * len(loads))])])]
            f.renumber()
        return bundle

    px = next(i for i in m.functions[0].instructions() if i.result == "px")
    _, res, rt = _campaign_run(m, spec.reference_input(), InjectionPlan(px.id, 2, 42), loader=loader)
    assert [a.decision for a in rt.log] == [PATCHED, PATCHED, ABORTED]
    assert rt.log[-1].reason == RETRY_EXHAUSTED and rt.log[-1].attempts == 3
    assert len(loads) == 2  # the third trap is refused before loading anything
    assert res.status == TRAPPED


def test_log_line_fields():
    spec = get_kernel("saxpy_unrolled")
    m, _ = apply_passes(spec.module(), "icp")
    phi = next(i for i in m.functions[0].instructions() if i.result == "i")
    _, _, rt = _campaign_run(m, spec.reference_input(), InjectionPlan(phi.id, 3, 40))
    line = rt.log[0].log_line(5)
    for field in ("plan_id=5", "key=saxpy_unrolled.mir:", "decision=IVRepaired", "attempts=1",
                  "elapsed_us=", "params_read=", "iv_repaired=i:"):
        assert field in line
