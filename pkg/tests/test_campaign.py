from __future__ import annotations

from crashlab.builder import build_bundle
from crashlab.campaign import (
    CSV_COLUMNS, CampaignConfig, format_iv_stats, make_context, mode_module, report_iv_stats,
    run_campaign, run_kernel_campaign,
)
from crashlab.injector import CLASSES, CRASH, InjectionPlan
from crashlab.kernels import FileKernel, get_kernel
from crashlab.runtime import RecoveryRuntime
from crashlab.transforms import apply_passes
from crashlab.vm import RunConfig, run

CFG = CampaignConfig(runs=120, seed=11)


def test_none_mode_report_arithmetic():
    rep = run_kernel_campaign(get_kernel("stencil"), "none", CFG)
    assert rep.recovery_rate is None and rep.recovered == 0
    assert sum(rep.outcomes[c] for c in CLASSES) == rep.runs == CFG.runs
    assert sum(rep.buckets.values()) == rep.outcomes[CRASH]
    assert sum(rep.traps.values()) == rep.crash_incidence
    assert len(rep.records) == CFG.runs


def test_recovery_modes_report_rates():
    for mode in ("care", "iterpro"):
        rep = run_kernel_campaign(get_kernel("dot"), mode, CFG)
        assert 0.0 <= rep.recovery_rate <= 1.0
        assert rep.recovered <= rep.invalid_access
        assert sum(rep.buckets.values()) == rep.outcomes[CRASH]


def test_crash_incidence_is_mode_independent():
    for name in ("saxpy_unrolled", "ptrwalk"):
        a = run_kernel_campaign(get_kernel(name), "none", CFG)
        b = run_kernel_campaign(get_kernel(name), "iterpro", CFG)
        assert a.crash_incidence == b.crash_incidence
        assert [r.first_trap for r in a.records] == [r.first_trap for r in b.records]


def test_unrolled_kernel_iterpro_at_least_care():
    care = run_kernel_campaign(get_kernel("saxpy_unrolled"), "care", CFG)
    full = run_kernel_campaign(get_kernel("saxpy_unrolled"), "iterpro", CFG)
    assert full.recovery_rate >= care.recovery_rate


def test_same_seed_same_csv():
    a = run_campaign(["saxpy"], "iterpro", CampaignConfig(runs=60, seed=3)).to_csv()
    b = run_campaign(["saxpy"], "iterpro", CampaignConfig(runs=60, seed=3)).to_csv()
    assert a == b
    assert a.splitlines()[0] == ",".join(CSV_COLUMNS)


def test_parallel_matches_serial():
    a = run_campaign(["dot"], "iterpro", CampaignConfig(runs=40, seed=5)).to_csv()
    b = run_campaign(["dot"], "iterpro", CampaignConfig(runs=40, seed=5, jobs=2)).to_csv()
    assert a == b


def test_checkpoint_enables_dynamic_base_recovery():
    """Corrupting the walking pointer: raw code cannot rebuild it, the checkpointed code can."""
    spec = get_kernel("ptrwalk")
    inputs = spec.reference_input()
    outcomes = {}
    for label, m in (("raw", spec.module()), ("mck", apply_passes(spec.module(), "mck")[0])):
        bundle = build_bundle(m)
        phi = next(i for i in m.functions[0].instructions() if i.result == "A")
        rt = RecoveryRuntime(lambda: bundle)
        run(m, inputs, RunConfig(injection=InjectionPlan(phi.id, 4, 43), recovery=rt))
        outcomes[label] = rt.log[0].decision
    assert outcomes == {"raw": "Aborted", "mck": "IVRepaired"}


def test_broken_kernel_is_reported_not_raised(tmp_path):
    bad = tmp_path / "bad.mir"
    bad.write_text("fn main {\nentry:\n  %x = add %y, 1\n  ret\n}\n")
    rep = run_campaign([FileKernel(str(bad)), get_kernel("saxpy")], "none", CampaignConfig(runs=5))
    assert rep.kernels[0].error and not rep.kernels[1].error
    assert "ERROR" in rep.summary()


def test_mode_modules():
    spec = get_kernel("dot")
    care = mode_module(spec, "care")
    full = mode_module(spec, "iterpro")
    assert any(b.label == "loop.unroll" for b in care.functions[0].blocks)
    assert any(i.result and i.result.endswith(".iv") for i in full.functions[0].instructions())
    assert make_context(spec, "none", CFG).bundle is None


def test_iv_stats_table():
    stats = {s.kernel: s for s in report_iv_stats()}
    assert (stats["saxpy"].before, stats["saxpy"].after) == (0, 0)
    assert stats["ptrwalk"].before == 0 and stats["ptrwalk"].after >= 1
    assert stats["ptrwalk"].improvement == "new"
    assert stats["sr_showcase"].after > stats["sr_showcase"].before > 0
    text = format_iv_stats(list(stats.values()), "csv")
    assert text.startswith("kernel,loops,original,transformed,improvement\n")
