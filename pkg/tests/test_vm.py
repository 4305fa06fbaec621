from __future__ import annotations

import math
import struct

import pytest
from hypothesis import given, strategies as st

from crashlab.analysis import compute_liveness
from crashlab.injector import InjectionPlan
from crashlab.kernels import get_kernel
from crashlab.mir import parse_module
from crashlab.transforms import apply_passes
from crashlab.vm import (
    COMPLETED, HANG, INVALID_ACCESS, MISALIGNED, TRAPPED, UNAVAILABLE, RunConfig, VM, format_inputs,
    from_bits, parse_inputs, profile, run, snapshot_live_state, to_bits,
)


def _dot_reference(x, y, n):
    acc = 0.0
    for a, b in zip(x[:n], y[:n]):
        acc = acc + a * b
    return acc


def test_dot_product_matches_reference():
    spec = get_kernel("dot")
    inputs = {"n": 8, "x": [1.5, -2.0, 3.25, 0.5, 7.0, -1.0, 2.0, 4.0],
              "y": [2.0, 0.5, -1.0, 8.0, 0.25, 3.0, -2.5, 1.0]}
    res = run(spec.module(), inputs)
    assert res.status == COMPLETED
    want = _dot_reference(inputs["x"], inputs["y"], 8)
    assert from_bits(res.ret, "float64") == want
    assert from_bits(res.outputs["out"][0], "float64") == want


def test_reference_inputs_complete_for_every_kernel():
    from crashlab.kernels import kernel_names
    for name in kernel_names():
        spec = get_kernel(name)
        assert run(spec.module(), spec.reference_input()).status == COMPLETED, name


def test_store_outside_regions_traps():
    m = parse_module("fn main {\nentry:\n  %p = addr 4096, 0, 8, 0\n  store 1, %p\n  ret\n}\n")
    res = run(m, {})
    assert res.status == TRAPPED and res.trap.kind == INVALID_ACCESS
    assert (res.trap.block, res.trap.pos) == ("entry", 1)
    assert res.trap.address == 4096


def test_misaligned_access_traps():
    m = parse_module("global g[4] : int64\nfn main {\nentry:\n  %p = addr @g, 0, 8, 3\n"
                     "  %v = load int64 %p\n  ret\n}\n")
    assert run(m, {}).trap.kind == MISALIGNED


def test_bit_40_flip_of_addr_on_third_execution():
    spec = get_kernel("saxpy")
    m = spec.module()
    f = m.functions[0]
    px = next(i for i in f.instructions() if i.opcode == "addr")
    golden = run(m, spec.reference_input(), RunConfig(trace=True))
    third = [v for _, fn, iid, v in golden.trace if iid == px.id][2]
    res = run(m, spec.reference_input(), RunConfig(injection=InjectionPlan(px.id, 3, 40)))
    assert res.status == TRAPPED and res.trap.kind == INVALID_ACCESS
    assert res.trap.address == third ^ (1 << 40)
    assert res.injection.before == third and res.injection.after == third ^ (1 << 40)


def test_step_budget_reports_hang():
    spec = get_kernel("dot")
    assert run(spec.module(), spec.reference_input(), RunConfig(step_budget=20)).status == HANG


def test_profile_counts():
    m = parse_module("fn main -> int64 {\nentry:\n  %a = add 1, 2\n  ret %a\n}\n")
    assert set(profile(m, {}).values()) == {1}
    spec = get_kernel("saxpy")
    m = spec.module()
    counts = profile(m, {**spec.reference_input(), "n": 10})
    f = m.functions[0]
    assert all(counts[("main", i.id)] == 10 for i in f.block("loop").instrs)
    assert all(counts[("main", i.id)] == 1 for i in f.block("entry").instrs)


def test_unrolled_saxpy_body_counts():
    spec = get_kernel("saxpy_unrolled")
    m = spec.module()
    inputs = spec.random_input(0)
    inputs.update(n=64, x=[1.0] * 64, y=[2.0] * 64)
    counts = profile(m, inputs)
    assert {counts[("main", i.id)] for i in m.functions[0].block("loop").instrs} == {32}


class _Grab:
    """Recovery hook that records the live state at the first trap and declines."""

    def __init__(self):
        self.ls = None
        self.log = []

    def on_trap(self, trap, state):
        if self.ls is None:
            self.ls = snapshot_live_state(trap, compute_liveness(state.frame.function), state)
        return False


def _trap_state(m, inputs, plan):
    hook = _Grab()
    run(m, inputs, RunConfig(injection=plan, recovery=hook))
    return hook.ls


def test_live_state_gating():
    spec = get_kernel("ptrwalk")
    m = spec.module()
    f = m.functions[0]
    anext = next(i for i in f.instructions() if i.result == "Anext")
    ls = _trap_state(m, spec.reference_input(), InjectionPlan(anext.id, 2, 45))
    assert isinstance(ls.read("i"), int) and ls.read("i") == 2
    assert ls.read("A0") is UNAVAILABLE  # dead after the loop is entered
    assert ls.read("n") == 12  # arguments stay readable


def test_checkpoint_slot_readable_when_init_is_dead():
    spec = get_kernel("ptrwalk")
    inputs = spec.reference_input()
    m, _ = apply_passes(spec.module(), "mck")
    f = m.functions[0]
    anext = next(i for i in f.instructions() if i.result == "Anext")
    ls = _trap_state(m, inputs, InjectionPlan(anext.id, 2, 45))
    assert ls.read("A0") is UNAVAILABLE
    base = 0x1000_0000  # first global region
    assert ls.read("slot.A.ckpt") == base + 8 * inputs["start"]


def test_input_format_round_trip():
    text = "n = 3\na = 2.5\nx = [1.0, -2.0, 3.0]\nk = [1, 2]\n"
    assert parse_inputs(format_inputs(parse_inputs(text))) == parse_inputs(text)


@given(st.floats(allow_nan=False))
def test_float_bits_round_trip(x):
    back = from_bits(to_bits(x, "float64"), "float64")
    assert back == x and math.copysign(1, back) == math.copysign(1, x)
    assert to_bits(x, "float64") == struct.unpack("<Q", struct.pack("<d", x))[0]


@given(st.integers(-(2**63), 2**63 - 1))
def test_int_bits_round_trip(x):
    assert from_bits(to_bits(x, "int64"), "int64") == x


def test_missing_entry_function():
    with pytest.raises(KeyError):
        VM(parse_module("fn f {\nentry:\n  ret\n}\n"), {}).run()
