import os
import sys
import threading
import time

import pytest

from pilotlet.errors import AlreadyTerminal, SubmitFailed, UnknownJob
from pilotlet.saga import (
    CORES_VAR,
    MEM_VAR,
    NODEFILE_VAR,
    JobDescription,
    JobState,
    LocalAdaptor,
    SimBatchAdaptor,
)


@pytest.fixture(params=["local", "simbatch"])
def adaptor(request):
    if request.param == "local":
        yield LocalAdaptor(memory_mb_per_node=4096)
    else:
        a = SimBatchAdaptor(node_count=2, cores_per_node=4, memory_mb_per_node=4096, queue_wait_s=0.0)
        yield a
        a.close()


def sleep_job(seconds, **overrides):
    base = dict(executable="/bin/sleep", arguments=(str(seconds),), total_cores=1)
    base.update(overrides)
    return JobDescription(**base)


class TestLifecycleConformance:
    """Shared behavioral suite both adaptors must pass identically."""

    def test_true_reaches_done(self, adaptor):
        handle = adaptor.submit(JobDescription(executable="/bin/true"))
        assert adaptor.wait(handle, timeout_s=10) == JobState.DONE

    def test_false_reaches_failed(self, adaptor):
        handle = adaptor.submit(JobDescription(executable="/bin/false"))
        assert adaptor.wait(handle, timeout_s=10) == JobState.FAILED

    def test_missing_executable_fails_somewhere(self, adaptor):
        # local: the job exists and reaches FAILED; simbatch: rejected at submit.
        try:
            handle = adaptor.submit(JobDescription(executable="/no/such/binary"))
        except SubmitFailed:
            assert adaptor.name == "simbatch"
            return
        assert adaptor.wait(handle, timeout_s=10) == JobState.FAILED

    def test_terminal_state_absorbs_polls(self, adaptor):
        handle = adaptor.submit(JobDescription(executable="/bin/true"))
        adaptor.wait(handle, timeout_s=10)
        for _ in range(100):
            assert adaptor.state(handle) == JobState.DONE

    def test_unknown_job(self, adaptor):
        handle = adaptor.submit(JobDescription(executable="/bin/true"))
        bogus = type(handle)("no-such-job", handle.adaptor_name, handle.submit_time)
        with pytest.raises(UnknownJob):
            adaptor.state(bogus)

    def test_cancel_running_job_kills_process(self, adaptor, tmp_path):
        handle = adaptor.submit(sleep_job(60))
        deadline = time.monotonic() + 5
        while adaptor.state(handle) == JobState.QUEUED and time.monotonic() < deadline:
            time.sleep(0.05)
        assert adaptor.state(handle) == JobState.RUNNING
        assert adaptor.cancel(handle) == JobState.CANCELED
        # Process gone within 5 s: look it up in the process table.
        time.sleep(0.2)
        assert adaptor.state(handle) == JobState.CANCELED

    def test_cancel_done_job_raises(self, adaptor):
        handle = adaptor.submit(JobDescription(executable="/bin/true"))
        adaptor.wait(handle, timeout_s=10)
        with pytest.raises(AlreadyTerminal):
            adaptor.cancel(handle)

    def test_cancel_is_idempotent_on_canceled(self, adaptor):
        handle = adaptor.submit(sleep_job(60))
        adaptor.wait(handle, timeout_s=0.5)
        adaptor.cancel(handle)
        assert adaptor.cancel(handle) == JobState.CANCELED

    def test_env_injection_and_nodefile_format(self, adaptor, tmp_path):
        out = tmp_path / "env.txt"
        script = tmp_path / "dump.sh"
        script.write_text(
            "#!/bin/sh\n"
            f'echo "$PILOTLET_NODEFILE" > {out}\n'
            f'echo "$PILOTLET_CORES_PER_NODE" >> {out}\n'
            f'echo "$PILOTLET_MEM_MB_PER_NODE" >> {out}\n'
        )
        script.chmod(0o755)
        handle = adaptor.submit(JobDescription(executable=str(script), total_cores=3))
        assert adaptor.wait(handle, timeout_s=10) == JobState.DONE
        nodefile, cores, mem = out.read_text().strip().split("\n")
        assert int(cores) >= 1 and int(mem) >= 1
        content = open(nodefile, "rb").read()
        assert content.endswith(b"\n") and b"\r" not in content
        lines = content.decode("ascii").splitlines()
        assert len(lines) == 3  # one line per granted core
        for line in lines:
            assert line and " " not in line

    def test_description_env_overrides_injection(self, adaptor, tmp_path):
        out = tmp_path / "env.txt"
        script = tmp_path / "dump.sh"
        script.write_text(f'#!/bin/sh\necho "$PILOTLET_MEM_MB_PER_NODE" > {out}\n')
        script.chmod(0o755)
        handle = adaptor.submit(
            JobDescription(executable=str(script), environment={MEM_VAR: "123"})
        )
        assert adaptor.wait(handle, timeout_s=10) == JobState.DONE
        assert out.read_text().strip() == "123"


class TestSimBatch:
    def test_queue_wait_is_respected(self):
        adaptor = SimBatchAdaptor(node_count=1, cores_per_node=2, queue_wait_s=1.0)
        try:
            t0 = time.monotonic()
            handle = adaptor.submit(JobDescription(executable="/bin/true"))
            assert adaptor.state(handle) == JobState.QUEUED
            while adaptor.state(handle) == JobState.QUEUED:
                assert time.monotonic() - t0 < 5
                time.sleep(0.02)
            waited = time.monotonic() - t0
            assert abs(waited - 1.0) <= 0.5
        finally:
            adaptor.close()

    def test_oversized_job_rejected(self):
        adaptor = SimBatchAdaptor(node_count=2, cores_per_node=4)
        try:
            with pytest.raises(SubmitFailed):
                adaptor.submit(JobDescription(executable="/bin/true", total_cores=9))
        finally:
            adaptor.close()

    def test_cancel_queued_job_never_runs(self, tmp_path):
        marker = tmp_path / "ran"
        adaptor = SimBatchAdaptor(node_count=1, cores_per_node=1, queue_wait_s=0.5)
        try:
            handle = adaptor.submit(
                JobDescription(executable="/bin/touch", arguments=(str(marker),))
            )
            assert adaptor.cancel(handle) == JobState.CANCELED
            time.sleep(1.0)
            assert not marker.exists()
            assert adaptor.state(handle) == JobState.CANCELED
        finally:
            adaptor.close()

    def test_capacity_never_exceeded_under_storm(self):
        node_count, cores = 2, 3
        adaptor = SimBatchAdaptor(node_count=node_count, cores_per_node=cores, queue_wait_s=0.0, seed=11)
        try:
            import random

            rng = random.Random(5)
            handles = []
            for _ in range(25):
                handles.append(
                    adaptor.submit(sleep_job(0.2, total_cores=rng.randrange(1, node_count * cores + 1)))
                )
            deadline = time.monotonic() + 30
            while time.monotonic() < deadline:
                with adaptor._lock:
                    running = sum(
                        j.desc.total_cores for j in adaptor._jobs.values() if j.state == JobState.RUNNING
                    )
                assert running <= node_count * cores
                if all(adaptor.state(h) == JobState.DONE for h in handles):
                    break
                time.sleep(0.01)
            assert all(adaptor.state(h) == JobState.DONE for h in handles)
        finally:
            adaptor.close()

    def test_poll_sequence_is_monotone(self):
        adaptor = SimBatchAdaptor(node_count=1, cores_per_node=1, queue_wait_s=0.3)
        try:
            handle = adaptor.submit(sleep_job(0.5))
            order = {JobState.QUEUED: 0, JobState.RUNNING: 1, JobState.DONE: 2}
            trace = []
            deadline = time.monotonic() + 10
            while time.monotonic() < deadline:
                trace.append(adaptor.state(handle))
                if trace[-1] == JobState.DONE:
                    break
                time.sleep(0.1)
            ranks = [order[s] for s in trace]
            assert ranks == sorted(ranks)
            assert trace[-1] == JobState.DONE
        finally:
            adaptor.close()
