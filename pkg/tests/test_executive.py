"""Session state-machine tests: setup integrity, dummy-UUT self test, the
functional-failure diagnosis branches, and log replay."""

import itertools

import pytest

from vcit.circuit import Bench, ContactState, DiodeModel, EsdPair, PadCircuit, UutModel
from vcit.errors import FixtureError
from vcit.executive import (
    AWAIT_DUMMY_MOUNT,
    FIXTURE_FAULT,
    NTF_ACTIONS,
    NTF_DETECTED,
    PASS,
    UUT_FAIL_FUNCTIONAL,
    UUT_FAIL_INTERFACE,
    DummyUutSpec,
    EventLog,
    NeedleLog,
    PadCheck,
    RailSenseCheck,
    Scenario,
    ScriptedOperator,
    SessionEvent,
    SessionPlan,
    VcitPlan,
    diagnose_functional_failure,
    dummy_self_test,
    parse_scenario,
    replay_verdict,
    run_session,
    run_setup_integrity,
    run_vcit_battery,
)
from vcit.fixture import load_default_fixture


@pytest.fixture
def fixture():
    return load_default_fixture()


def bench_with_open(fixture, pad_id):
    contacts = dict(fixture.bench.contacts)
    contacts[pad_id] = ContactState(2e6)
    return Bench(fixture.bench.uut, contacts)


FRESH = NeedleLog(last_replacement_cycle=100, current_cycle=100, window_cycles=500)
STALE = NeedleLog(last_replacement_cycle=0, current_cycle=900, window_cycles=500)


class TestNeedleLog:
    def test_window_boundary_is_fresh(self):
        log = NeedleLog(last_replacement_cycle=0, current_cycle=500, window_cycles=500)
        assert log.replaced_within_window

    def test_past_window_is_stale(self):
        log = NeedleLog(last_replacement_cycle=0, current_cycle=501, window_cycles=500)
        assert not log.replaced_within_window


class TestSetupIntegrity:
    def test_healthy_bench_passes(self, fixture):
        log = EventLog()
        verdict = run_setup_integrity(fixture.bench, fixture.vcit_plan, log=log)
        assert verdict.passed
        assert log.events[-1].outcome == "pass"

    def test_open_contact_fails_and_identifies(self, fixture):
        bench = bench_with_open(fixture, "p2")
        verdict = run_setup_integrity(bench, fixture.vcit_plan)
        assert not verdict.passed
        failed = verdict.detail["failed"]
        assert any(d.get("pad_id") == "p2" for d in failed if "pad_id" in d)

    def test_empty_plan_warns_and_passes(self, fixture):
        log = EventLog()
        verdict = run_setup_integrity(fixture.bench, VcitPlan(checks=()), log=log)
        assert verdict.passed
        assert verdict.detail["empty"]
        assert any(e.action == "setup-plan-empty" for e in log.events)

    def test_battery_pad_restriction(self, fixture):
        bench = bench_with_open(fixture, "p2")
        # only p1's checks run: its single-level check passes, but the
        # rail-sense check includes p2, so the restricted battery still fails
        verdict = run_vcit_battery(bench, fixture.vcit_plan, pads=["p1"])
        assert not verdict.passed
        kinds = [d["check"] for d in verdict.detail["checks"]]
        assert "rail-sense" in kinds

    def test_rail_sense_check_reading_in_band(self, fixture):
        verdict = run_vcit_battery(
            fixture.bench,
            VcitPlan(checks=(RailSenseCheck(("p1", "p2", "p3"), 5e-3, (0.1, 0.5)),)),
        )
        assert verdict.passed


class TestDummyUut:
    def test_default_dummy_passes_fresh(self, fixture):
        assert dummy_self_test(fixture.dummy, fixture.bench.contacts).passed

    def test_worn_contacts_fail(self, fixture):
        worn = {pid: ContactState(500.0) for pid in fixture.bench.contacts}
        verdict = dummy_self_test(fixture.dummy, worn)
        assert not verdict.passed

    def test_zero_pads_rejected_at_load(self):
        with pytest.raises(FixtureError):
            DummyUutSpec(uut=UutModel(pads=()), bands={})

    def test_missing_band_rejected(self, fixture):
        with pytest.raises(FixtureError):
            DummyUutSpec(uut=fixture.dummy.uut, bands={"p1": (0.1, 0.5)})

    def test_inconsistent_band_rejected(self, fixture):
        bands = {pid: (0.9, 1.0) for pid, _ in fixture.dummy.uut.pads}
        with pytest.raises(FixtureError):
            DummyUutSpec(uut=fixture.dummy.uut, bands=bands)


def forced_plan(fixture, *, vcit, needles, dummy, functional="fail"):
    return SessionPlan(
        vcit_plan=fixture.vcit_plan,
        needle_log=FRESH if needles == "fresh" else STALE,
        dummy=fixture.dummy,
        functional_outcome=functional,
        failed_pads=("p1",),
        forced_vcit=vcit,
        forced_dummy=dummy,
    )


# The full diagnosis decision table.  The dummy column is irrelevant when the
# VCIT battery passes or the needles are fresh; enumerating it anyway pins
# down that irrelevance.
BRANCHES = [
    (vcit, needles, dummy)
    for vcit, needles, dummy in itertools.product(
        ("pass", "fail"), ("fresh", "stale"), ("pass", "fail")
    )
]


def expected_kind(vcit, needles, dummy):
    if vcit == "pass":
        return UUT_FAIL_FUNCTIONAL
    if needles == "fresh":
        return UUT_FAIL_INTERFACE
    return UUT_FAIL_INTERFACE if dummy == "pass" else NTF_DETECTED


class TestDiagnosisBranches:
    @pytest.mark.parametrize("vcit,needles,dummy", BRANCHES)
    def test_verdict_table(self, fixture, vcit, needles, dummy):
        plan = forced_plan(fixture, vcit=vcit, needles=needles, dummy=dummy)
        verdict, events = run_session(plan, fixture.bench, ScriptedOperator())
        assert verdict.kind == expected_kind(vcit, needles, dummy)
        assert replay_verdict(events) == verdict.kind

    @pytest.mark.parametrize("vcit,needles,dummy", BRANCHES)
    def test_prompt_only_when_dummy_needed(self, fixture, vcit, needles, dummy):
        plan = forced_plan(fixture, vcit=vcit, needles=needles, dummy=dummy)
        _, events = run_session(plan, fixture.bench, ScriptedOperator())
        prompts = [e for e in events if e.action == "prompt:mount-dummy"]
        needed = vcit == "fail" and needles == "stale"
        assert bool(prompts) == needed
        if needed:
            # every prompt is followed by its logged response
            responses = [e for e in events if e.action == "response:mount-dummy"]
            assert len(responses) == len(prompts) == 1
            assert responses[0].index == prompts[0].index + 1

    def test_ntf_actions_logged_in_order(self, fixture):
        plan = forced_plan(fixture, vcit="fail", needles="stale", dummy="fail")
        verdict, events = run_session(plan, fixture.bench, ScriptedOperator())
        assert verdict.kind == NTF_DETECTED
        actions = tuple(e.outcome for e in events if e.action == "action")
        assert actions == NTF_ACTIONS
        for action in NTF_ACTIONS:
            assert action in verdict.evidence

    def test_operator_abort_is_fixture_fault(self, fixture):
        plan = forced_plan(fixture, vcit="fail", needles="stale", dummy="fail")
        operator = ScriptedOperator({"mount-dummy": "aborted"})
        verdict, events = run_session(plan, fixture.bench, operator)
        assert verdict.kind == FIXTURE_FAULT
        assert "operator-aborted" in verdict.evidence
        assert replay_verdict(events) == FIXTURE_FAULT

    def test_measured_branches_without_forcing(self, fixture):
        # worn bench: setup would fail, so diagnose directly
        log = EventLog()
        bench = bench_with_open(fixture, "p1")
        verdict = diagnose_functional_failure(
            bench,
            ["p1"],
            STALE,
            ScriptedOperator(),
            plan=fixture.vcit_plan,
            dummy=fixture.dummy,
            log=log,
        )
        # open needle: VCIT fails, dummy (measured on the same worn
        # contacts) fails too -> NTF
        assert verdict.kind == NTF_DETECTED


class TestSession:
    def test_functional_pass(self, fixture):
        plan = SessionPlan(vcit_plan=fixture.vcit_plan, dummy=fixture.dummy)
        verdict, events = run_session(plan, fixture.bench, ScriptedOperator())
        assert verdict.kind == PASS
        assert replay_verdict(events) == PASS

    def test_setup_failure_blocks_functional_run(self, fixture):
        bench = bench_with_open(fixture, "p3")
        plan = SessionPlan(vcit_plan=fixture.vcit_plan, dummy=fixture.dummy)
        verdict, events = run_session(plan, bench, ScriptedOperator())
        assert verdict.kind == FIXTURE_FAULT
        assert not any(e.action == "functional-stub" for e in events)
        assert replay_verdict(events) == FIXTURE_FAULT

    def test_log_is_strictly_ordered_and_terminal(self, fixture):
        plan = forced_plan(fixture, vcit="fail", needles="stale", dummy="fail")
        _, events = run_session(plan, fixture.bench, ScriptedOperator())
        assert [e.index for e in events] == list(range(len(events)))
        assert events[-1].phase == "Terminal"
        assert events[-1].action == "verdict"

    def test_determinism(self, fixture):
        plan = forced_plan(fixture, vcit="fail", needles="stale", dummy="fail")
        a = run_session(plan, fixture.bench, ScriptedOperator())
        b = run_session(plan, fixture.bench, ScriptedOperator())
        assert a[0] == b[0]
        assert a[1] == b[1]

    def test_event_json_round_trip(self, fixture):
        plan = forced_plan(fixture, vcit="fail", needles="stale", dummy="fail")
        _, events = run_session(plan, fixture.bench, ScriptedOperator())
        lines = [e.to_json() for e in events]
        restored = [SessionEvent.from_json(ln) for ln in lines]
        assert restored == events
        assert replay_verdict(restored) == NTF_DETECTED

    def test_replay_rejects_undecided_log(self):
        with pytest.raises(ValueError):
            replay_verdict([SessionEvent(0, "Idle", "session-start", "seed=0")])


class TestScenarioParsing:
    def test_full_scenario(self):
        text = """
        # maintenance drill
        functional: fail
        failed-pads: p1 p2
        needles: stale
        force-vcit: fail
        force-dummy: fail
        operator.mount-dummy: confirmed
        seed: 7
        """
        s = parse_scenario(text)
        assert s == Scenario(
            functional="fail",
            failed_pads=("p1", "p2"),
            needles="stale",
            force_vcit="fail",
            force_dummy="fail",
            operator_responses={"mount-dummy": "confirmed"},
            seed=7,
        )

    def test_defaults(self):
        assert parse_scenario("") == Scenario()

    @pytest.mark.parametrize(
        "line",
        [
            "functional: maybe",
            "needles: rusty",
            "force-vcit: dunno",
            "operator.mount-dummy: shrug",
            "seed: seven",
            "unknown-key: 1",
            "no colon here",
        ],
    )
    def test_bad_lines_rejected(self, line):
        with pytest.raises(FixtureError):
            parse_scenario(line)


def test_scripted_operator_default_and_override():
    op = ScriptedOperator({"mount-dummy": "aborted"})
    assert op.ask("mount-dummy") == "aborted"
    assert op.ask("anything-else") == "confirmed"
