import json
import random

import pytest

from pilotlet.core import (
    ClusterFlavor,
    ClusterMode,
    ComputeUnitDescription,
    LaunchMethod,
    PilotDescription,
    PilotState,
    StagingDirection,
    StagingDirective,
    UnitState,
    dump_workload,
    load_workload,
    resolve_launch_method,
    transition,
    validate_pilot_description,
    validate_unit_description,
)
from pilotlet.errors import IllegalTransition, ValidationError


def make_pilot(**overrides) -> PilotDescription:
    base = dict(
        resource_name="local",
        cores=4,
        memory_mb_per_node=8192,
        runtime_s=60,
    )
    base.update(overrides)
    return PilotDescription(**base)


def make_unit(**overrides) -> ComputeUnitDescription:
    base = dict(executable="/bin/true")
    base.update(overrides)
    return ComputeUnitDescription(**base)


class TestPilotValidation:
    def test_reference_description_is_valid(self):
        # 48 cores / 128 GB per node is a realistic fat-node request.
        d = make_pilot(cores=48, memory_mb_per_node=131072, runtime_s=600,
                       cluster_flavor=ClusterFlavor.YARN_LIKE, cluster_mode=ClusterMode.SPAWN)
        assert validate_pilot_description(d) is d

    def test_zero_cores_rejected(self):
        with pytest.raises(ValidationError) as err:
            validate_pilot_description(make_pilot(cores=0))
        assert any("cores" in v for v in err.value.violations)

    def test_connect_requires_url(self):
        d = make_pilot(cluster_flavor=ClusterFlavor.YARN_LIKE, cluster_mode=ClusterMode.CONNECT)
        with pytest.raises(ValidationError) as err:
            validate_pilot_description(d)
        assert any("connect_url" in v for v in err.value.violations)

    def test_connect_requires_flavor(self):
        d = make_pilot(cluster_mode=ClusterMode.CONNECT, connect_url="http://127.0.0.1:1")
        with pytest.raises(ValidationError) as err:
            validate_pilot_description(d)
        assert any("cluster_flavor" in v for v in err.value.violations)

    def test_all_violations_reported_not_just_first(self):
        d = make_pilot(cores=0, runtime_s=0, memory_mb_per_node=0)
        with pytest.raises(ValidationError) as err:
            validate_pilot_description(d)
        assert len(err.value.violations) == 3


class TestUnitValidation:
    def test_defaults_valid(self):
        validate_unit_description(make_unit())

    def test_empty_executable(self):
        with pytest.raises(ValidationError):
            validate_unit_description(make_unit(executable=""))

    def test_bad_memory_and_cores_both_reported(self):
        with pytest.raises(ValidationError) as err:
            validate_unit_description(make_unit(cores=0, memory_mb=0))
        assert len(err.value.violations) == 2

    def test_staging_escape_rejected(self):
        d = make_unit(input_staging=[StagingDirective("/tmp/x", "../../etc/passwd", StagingDirection.IN)])
        with pytest.raises(ValidationError) as err:
            validate_unit_description(d)
        assert any("escape" in v for v in err.value.violations)

    def test_absolute_staging_target_rejected(self):
        d = make_unit(output_staging=[StagingDirective("/tmp/x", "/abs", StagingDirection.OUT)])
        with pytest.raises(ValidationError):
            validate_unit_description(d)


class TestTransitions:
    def test_pending_to_scheduled(self):
        assert transition(UnitState.PENDING, UnitState.SCHEDULED) == UnitState.SCHEDULED

    def test_terminal_absorbs(self):
        with pytest.raises(IllegalTransition):
            transition(UnitState.DONE, UnitState.EXECUTING)

    def test_allocating_blocked_for_fork(self):
        with pytest.raises(IllegalTransition):
            transition(UnitState.SCHEDULED, UnitState.ALLOCATING, launch_method=LaunchMethod.FORK)

    def test_allocating_allowed_for_yarn(self):
        got = transition(UnitState.SCHEDULED, UnitState.ALLOCATING, launch_method=LaunchMethod.YARN)
        assert got == UnitState.ALLOCATING

    def test_kind_mismatch(self):
        with pytest.raises(IllegalTransition):
            transition(PilotState.NEW, UnitState.PENDING)

    def test_pilot_happy_path(self):
        path = [PilotState.NEW, PilotState.PENDING_LAUNCH, PilotState.LAUNCHING,
                PilotState.ACTIVE, PilotState.DONE]
        for cur, new in zip(path, path[1:]):
            assert transition(cur, new) == new

    def test_any_nonterminal_cancels(self):
        for state in (PilotState.NEW, PilotState.LAUNCHING, PilotState.ACTIVE):
            assert transition(state, PilotState.CANCELED) == PilotState.CANCELED

    def test_done_only_from_staging_out(self):
        with pytest.raises(IllegalTransition):
            transition(UnitState.EXECUTING, UnitState.DONE)


def _legal_unit_edges(launch_method):
    edges = {
        UnitState.NEW: {UnitState.PENDING},
        UnitState.PENDING: {UnitState.SCHEDULED},
        UnitState.SCHEDULED: {UnitState.ALLOCATING, UnitState.EXECUTING},
        UnitState.ALLOCATING: {UnitState.EXECUTING},
        UnitState.EXECUTING: {UnitState.STAGING_OUT},
        UnitState.STAGING_OUT: {UnitState.DONE},
    }
    legal = set()
    terminal = {UnitState.DONE, UnitState.FAILED, UnitState.CANCELED}
    for cur in UnitState:
        if cur in terminal:
            continue
        for new in edges.get(cur, set()):
            if new == UnitState.ALLOCATING and launch_method != LaunchMethod.YARN:
                continue
            legal.add((cur, new))
        legal.add((cur, UnitState.FAILED))
        legal.add((cur, UnitState.CANCELED))
    return legal


def test_transition_matches_enumerated_legality_table():
    # Full cross-product check against an independently built table.
    for method in (LaunchMethod.FORK, LaunchMethod.YARN, LaunchMethod.SPARK):
        legal = _legal_unit_edges(method)
        for cur in UnitState:
            for new in UnitState:
                try:
                    transition(cur, new, launch_method=method)
                    ok = True
                except IllegalTransition:
                    ok = False
                assert ok == ((cur, new) in legal), (method, cur, new)


def test_fuzzed_walks_never_take_an_illegal_edge():
    rng = random.Random(20240817)
    pilot_states = list(PilotState)
    unit_states = list(UnitState)
    for _ in range(10_000):
        if rng.random() < 0.5:
            states, start = pilot_states, PilotState.NEW
        else:
            states, start = unit_states, UnitState.NEW
        current = start
        for _ in range(rng.randrange(1, 8)):
            proposed = rng.choice(states)
            method = rng.choice([LaunchMethod.FORK, LaunchMethod.YARN, None])
            try:
                nxt = transition(current, proposed, launch_method=method)
            except IllegalTransition:
                continue
            # Re-validate the accepted edge independently.
            if isinstance(current, UnitState):
                table = _legal_unit_edges(method if method is not None else LaunchMethod.YARN)
                assert (current, nxt) in table
            current = nxt


def test_validation_is_total_over_random_descriptions():
    rng = random.Random(7)
    for _ in range(500):
        d = PilotDescription(
            resource_name=rng.choice(["", "local", "simbatch"]),
            cores=rng.randrange(-2, 5),
            memory_mb_per_node=rng.randrange(-1, 4096),
            runtime_s=rng.randrange(-1, 100),
            cluster_flavor=rng.choice(list(ClusterFlavor)),
            cluster_mode=rng.choice(list(ClusterMode)),
            connect_url=rng.choice([None, "http://127.0.0.1:9"]),
        )
        try:
            validate_pilot_description(d)
        except ValidationError as exc:
            assert exc.violations


class TestResolveLaunchMethod:
    def test_auto_follows_flavor(self):
        assert resolve_launch_method(LaunchMethod.AUTO, ClusterFlavor.YARN_LIKE) == LaunchMethod.YARN
        assert resolve_launch_method(LaunchMethod.AUTO, ClusterFlavor.SPARK_LIKE) == LaunchMethod.SPARK
        assert resolve_launch_method(LaunchMethod.AUTO, ClusterFlavor.NONE) == LaunchMethod.FORK

    def test_explicit_hint_wins(self):
        assert resolve_launch_method(LaunchMethod.FORK, ClusterFlavor.YARN_LIKE) == LaunchMethod.FORK


class TestWorkloadFile:
    def test_round_trip(self, tmp_path):
        pilot = make_pilot()
        units = [make_unit(arguments=["a", "b"]), make_unit(executable="/bin/echo")]
        path = tmp_path / "w.json"
        path.write_text(dump_workload(pilot, units), encoding="utf-8")
        got_pilot, got_units = load_workload(path)
        assert got_pilot == pilot
        assert got_units == units

    def test_unknown_top_level_key(self, tmp_path):
        path = tmp_path / "w.json"
        path.write_text(json.dumps({"pilot": make_pilot().to_dict(), "units": [], "extra": 1}))
        with pytest.raises(ValidationError) as err:
            load_workload(path)
        assert any("extra" in v for v in err.value.violations)

    def test_unknown_unit_key(self, tmp_path):
        doc = {"pilot": make_pilot().to_dict(), "units": [{"executable": "/bin/true", "nproc": 2}]}
        path = tmp_path / "w.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ValidationError) as err:
            load_workload(path)
        assert any("nproc" in v for v in err.value.violations)
