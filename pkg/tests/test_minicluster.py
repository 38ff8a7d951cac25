import os
import random
import signal
import threading
import time

import pytest

from pilotlet.core import ClusterFlavor
from pilotlet.errors import ImpossibleRequest, IoFailed, UnknownApp, ValidationError
from pilotlet.minicluster import (
    MiniCluster,
    NodeSpec,
    RMClient,
    generate_configs,
    parse_cluster_conf,
    parse_exit_code,
)


def two_nodes(vcores=16, memory_mb=32768):
    return [NodeSpec("n0", "n0", vcores, memory_mb), NodeSpec("n1", "n1", vcores, memory_mb)]


@pytest.fixture
def yarn(tmp_path):
    cluster = MiniCluster(ClusterFlavor.YARN_LIKE, two_nodes(), tmp_path / "scratch",
                          spawn_node_managers=False)
    cluster.start()
    yield cluster, RMClient(cluster.endpoint)
    cluster.stop()


@pytest.fixture
def spark(tmp_path):
    cluster = MiniCluster(ClusterFlavor.SPARK_LIKE, two_nodes(vcores=4, memory_mb=8192),
                          tmp_path / "scratch", spawn_node_managers=False)
    cluster.start()
    yield cluster, RMClient(cluster.endpoint)
    cluster.stop()


def app_spec(command, vcores=1, memory_mb=256, name="t", **task_extra):
    task = {"vcores": vcores, "memory_mb": memory_mb, "command": command}
    task.update(task_extra)
    return {"name": name, "task_spec": task}


class TestConfigs:
    def test_three_nodes(self, tmp_path):
        nodes = [NodeSpec(f"n{i}", f"n{i}", 8, 4096) for i in range(3)]
        files = generate_configs(nodes, tmp_path / "conf", flavor=ClusterFlavor.YARN_LIKE, rm_port=7001)
        assert files["master"].read_text() == "n0\n"
        assert files["slaves"].read_text() == "n1\nn2\n"
        conf = files["conf"].read_text()
        assert "flavor=yarn\n" in conf
        assert "rm_port=7001\n" in conf
        for i in range(3):
            assert f"node.{i}.hostname=n{i}\n" in conf
            assert f"node.{i}.vcores=8\n" in conf
            assert f"node.{i}.memory_mb=4096\n" in conf

    def test_single_node_has_empty_slaves(self, tmp_path):
        files = generate_configs([NodeSpec("n0", "n0", 4, 2048)], tmp_path / "conf")
        assert files["slaves"].read_text() == ""

    def test_unwritable_dir(self, tmp_path):
        # A regular file where a directory is needed fails for any uid.
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        with pytest.raises(IoFailed):
            generate_configs([NodeSpec("n0", "n0", 4, 2048)], blocker / "conf")

    def test_round_trip_through_parser(self, tmp_path):
        nodes = two_nodes(vcores=12, memory_mb=24576)
        files = generate_configs(nodes, tmp_path / "conf", flavor=ClusterFlavor.SPARK_LIKE, rm_port=0)
        conf = parse_cluster_conf(files["conf"])
        assert conf["flavor"] == ClusterFlavor.SPARK_LIKE
        assert conf["nodes"] == nodes


class TestMetrics:
    def test_fresh_cluster_totals(self, yarn):
        _, client = yarn
        m = client.metrics()
        assert m["totalVirtualCores"] == 32
        assert m["availableVirtualCores"] == 32
        assert m["totalMemoryMB"] == 65536
        assert m["availableMemoryMB"] == 65536

    def test_after_am_and_task_allocation(self, yarn):
        _, client = yarn
        app_id = client.submit_app(app_spec(["/bin/sleep", "5"], vcores=4, memory_mb=8192))
        deadline = time.monotonic() + 15
        while client.get_app(app_id)["state"] != "RUNNING":
            assert time.monotonic() < deadline
            time.sleep(0.05)
        m = client.metrics()
        # AM holds 1 vcore / 512 MB, the task 4 vcores / 8192 MB.
        assert m["availableVirtualCores"] == 32 - 5
        assert m["availableMemoryMB"] == 65536 - 8704
        client.kill_app(app_id)


class TestTwoPhaseApps:
    def test_app_runs_and_finishes_with_two_containers(self, yarn):
        _, client = yarn
        app_id = client.submit_app(app_spec(["/bin/sleep", "0.3"], vcores=4, memory_mb=8192))
        app = client.wait_app(app_id, timeout_s=20)
        assert app["state"] == "FINISHED"
        assert app["amContainer"] is not None
        assert len(app["taskContainers"]) == 1
        assert app["amContainer"]["state"] == "RELEASED"
        assert app["taskContainers"][0]["state"] == "RELEASED"
        journal = client.journal()
        allocs = [e for e in journal if e["event"] == "CONTAINER_ALLOCATE" and e["appId"] == app_id]
        releases = [e for e in journal if e["event"] == "CONTAINER_RELEASE" and e["appId"] == app_id]
        assert [e["role"] for e in allocs] == ["AM", "TASK"]
        assert allocs[0]["version"] < allocs[1]["version"]
        assert len(releases) == 2
        assert min(e["version"] for e in releases) > max(e["version"] for e in allocs)

    def test_exit_code_in_log(self, yarn, tmp_path):
        _, client = yarn
        script = tmp_path / "exit3.sh"
        script.write_text("#!/bin/sh\nexit 3\n")
        script.chmod(0o755)
        app_id = client.submit_app(app_spec([str(script)]))
        app = client.wait_app(app_id, timeout_s=20)
        assert app["state"] == "FAILED"
        assert parse_exit_code(app["logPath"]) == 3

    def test_exit_zero_in_log(self, yarn):
        _, client = yarn
        app_id = client.submit_app(app_spec(["/bin/true"]))
        app = client.wait_app(app_id, timeout_s=20)
        assert app["state"] == "FINISHED"
        log_text = open(app["logPath"]).read()
        assert log_text.rstrip("\n").splitlines()[-1] == "EXIT 0"
        assert parse_exit_code(app["logPath"]) == 0

    def test_fifo_admission_between_big_apps(self, tmp_path):
        cluster = MiniCluster(ClusterFlavor.YARN_LIKE, [NodeSpec("n0", "n0", 16, 32768)],
                              tmp_path / "scratch", spawn_node_managers=False)
        cluster.start()
        client = RMClient(cluster.endpoint)
        try:
            first = client.submit_app(app_spec(["/bin/sleep", "1"], vcores=10, name="first"))
            second = client.submit_app(app_spec(["/bin/sleep", "0.1"], vcores=10, name="second"))
            done = client.wait_app(second, timeout_s=30)
            assert done["state"] == "FINISHED"
            journal = client.journal()
            first_release = min(
                e["version"] for e in journal
                if e["event"] == "CONTAINER_RELEASE" and e["appId"] == first and e["role"] == "TASK"
            )
            second_alloc = min(
                e["version"] for e in journal
                if e["event"] == "CONTAINER_ALLOCATE" and e["appId"] == second and e["role"] == "TASK"
            )
            assert second_alloc > first_release
        finally:
            cluster.stop()

    def test_impossible_request_rejected(self, yarn):
        _, client = yarn
        with pytest.raises(ImpossibleRequest):
            client.submit_app(app_spec(["/bin/true"], vcores=64))


class TestKill:
    def test_kill_running_restores_vcores(self, yarn):
        _, client = yarn
        app_id = client.submit_app(app_spec(["/bin/sleep", "60"], vcores=4))
        deadline = time.monotonic() + 15
        while client.get_app(app_id)["state"] != "RUNNING":
            assert time.monotonic() < deadline
            time.sleep(0.05)
        assert client.kill_app(app_id) == "KILLED"
        m = client.metrics()
        assert m["availableVirtualCores"] == m["totalVirtualCores"]
        assert m["availableMemoryMB"] == m["totalMemoryMB"]

    def test_kill_finished_is_noop(self, yarn):
        _, client = yarn
        app_id = client.submit_app(app_spec(["/bin/true"]))
        client.wait_app(app_id, timeout_s=20)
        assert client.kill_app(app_id) == "FINISHED"

    def test_kill_unknown_app(self, yarn):
        _, client = yarn
        with pytest.raises(UnknownApp):
            client.kill_app("app-9999")


class TestSparkFlavor:
    def test_round_robin_spread(self, spark, tmp_path):
        _, client = spark
        app_id = client.submit_app(app_spec(["/bin/sleep", "1"], vcores=6, memory_mb=1024))
        deadline = time.monotonic() + 15
        while client.get_app(app_id)["state"] != "RUNNING":
            assert time.monotonic() < deadline
            time.sleep(0.05)
        app = client.get_app(app_id)
        assert app["amContainer"] is None
        by_node = {c["nodeId"]: c["vcores"] for c in app["taskContainers"]}
        assert by_node == {"n0": 3, "n1": 3}
        client.kill_app(app_id)

    def test_whole_cluster_bound_second_app_queues(self, spark):
        _, client = spark
        first = client.submit_app(app_spec(["/bin/sleep", "0.5"], vcores=8, memory_mb=512))
        second = client.submit_app(app_spec(["/bin/true"], vcores=1, memory_mb=64))
        deadline = time.monotonic() + 15
        while client.get_app(first)["state"] != "RUNNING":
            assert time.monotonic() < deadline
            time.sleep(0.05)
        assert client.get_app(second)["state"] == "SUBMITTED"
        assert client.wait_app(second, timeout_s=20)["state"] == "FINISHED"

    def test_failing_command_frees_cores(self, spark):
        _, client = spark
        app_id = client.submit_app(app_spec(["/bin/false"], vcores=3, memory_mb=256))
        app = client.wait_app(app_id, timeout_s=20)
        assert app["state"] == "FAILED"
        m = client.metrics()
        assert m["availableVirtualCores"] == m["totalVirtualCores"]

    def test_oversized_spark_request(self, spark):
        _, client = spark
        with pytest.raises(ImpossibleRequest):
            client.submit_app(app_spec(["/bin/true"], vcores=9))


def test_metrics_linearizable_against_journal(tmp_path):
    cluster = MiniCluster(ClusterFlavor.YARN_LIKE, two_nodes(vcores=8, memory_mb=8192),
                          tmp_path / "scratch", spawn_node_managers=False)
    cluster.start()
    client = RMClient(cluster.endpoint)
    snapshots = []
    stop = threading.Event()

    def sampler():
        while not stop.is_set():
            snapshots.append(client.metrics())
            time.sleep(0.01)

    t = threading.Thread(target=sampler)
    t.start()
    try:
        rng = random.Random(3)
        ids = []
        for _ in range(10):
            ids.append(client.submit_app(
                app_spec(["/bin/sleep", "0.2"], vcores=rng.randrange(1, 4), memory_mb=256)
            ))
        for app_id in ids:
            client.wait_app(app_id, timeout_s=30)
    finally:
        stop.set()
        t.join()
    journal = client.journal()
    allocated_at = {0: (0, 0)}
    for entry in journal:
        allocated_at[entry["version"]] = (entry["allocatedVcores"], entry["allocatedMemoryMb"])
    total_v = 16
    total_m = 16384
    assert snapshots
    for snap in snapshots:
        alloc_v, alloc_m = allocated_at[snap["ledgerVersion"]]
        assert snap["availableVirtualCores"] == total_v - alloc_v
        assert snap["availableMemoryMB"] == total_m - alloc_m
    cluster.stop()


def test_port_collision_binds_next_port(tmp_path):
    a = MiniCluster(ClusterFlavor.YARN_LIKE, two_nodes(), tmp_path / "a",
                    port=47310, spawn_node_managers=False)
    a.start()
    b = MiniCluster(ClusterFlavor.YARN_LIKE, two_nodes(), tmp_path / "b",
                    port=47310, spawn_node_managers=False)
    b.start()
    try:
        assert a.endpoint.endswith(":47310")
        assert b.endpoint.endswith(":47311")
        assert RMClient(b.endpoint).health()["status"] == "ok"
    finally:
        a.stop()
        b.stop()


def test_stop_kills_containers_and_removes_scratch(tmp_path):
    scratch = tmp_path / "scratch"
    cluster = MiniCluster(ClusterFlavor.YARN_LIKE, two_nodes(), scratch, spawn_node_managers=False)
    cluster.start()
    client = RMClient(cluster.endpoint)
    ids = [client.submit_app(app_spec(["/bin/sleep", "120"], vcores=2, name=f"s{i}"))
           for i in range(3)]
    deadline = time.monotonic() + 20
    while time.monotonic() < deadline:
        if all(client.get_app(i)["state"] == "RUNNING" for i in ids):
            break
        time.sleep(0.05)
    with cluster._cond:
        pids = [a.task_proc.pid for a in cluster._apps.values() if a.task_proc is not None]
        pids += [a.am_proc.pid for a in cluster._apps.values() if a.am_proc is not None]
    assert pids
    cluster.stop()
    for pid in pids:
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            try:
                os.kill(pid, 0)
            except ProcessLookupError:
                break
            time.sleep(0.05)
        else:
            pytest.fail(f"process {pid} survived cluster stop")
    assert not scratch.exists()


def test_node_manager_daemons_supervised(tmp_path):
    cluster = MiniCluster(ClusterFlavor.YARN_LIKE, two_nodes(), tmp_path / "scratch",
                          spawn_node_managers=True)
    cluster.start()
    client = RMClient(cluster.endpoint)
    try:
        deadline = time.monotonic() + 10
        while client.health()["nodeManagers"] != 2:
            assert time.monotonic() < deadline
            time.sleep(0.1)
        assert client.metrics()["nodeCount"] == 2
    finally:
        cluster.stop()
