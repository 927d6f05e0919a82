"""Shared fixtures: spawned target processes and tracing-privilege guards."""

import collections
import os
import signal
import socket
import subprocess
import sys
import threading
import time

import pytest

from syschaos.cli import has_tracing_privilege

requires_ptrace = pytest.mark.skipif(
    not has_tracing_privilege(), reason="needs root or CAP_SYS_PTRACE")


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class SpawnedFixture:
    """A fixture subprocess with its READY/LISTENING banner already consumed."""

    def __init__(self, proc: subprocess.Popen, banner: str):
        self.proc = proc
        self.banner = banner
        self.pid = proc.pid
        self._drained = None

    def drain_stdout(self, keep_last: int = 200) -> None:
        """Consume stdout in the background so a chatty target never blocks
        on a full pipe; the most recent lines stay available for assertions."""
        self._drained = collections.deque(maxlen=keep_last)

        def pump():
            for line in self.proc.stdout:
                self._drained.append(line)

        threading.Thread(target=pump, daemon=True).start()

    @property
    def drained_lines(self):
        return list(self._drained or ())

    def signal(self, sig) -> None:
        os.kill(self.pid, sig)

    def go(self) -> None:
        os.kill(self.pid, signal.SIGUSR1)

    def finish_and_read(self, timeout: float = 30.0) -> str:
        """Allow the summary to print, then drain stdout to EOF."""
        os.kill(self.pid, signal.SIGUSR2)
        out, _ = self.proc.communicate(timeout=timeout)
        return out

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass


@pytest.fixture
def spawn_copier():
    """Factory for handshake-mode fx-copy processes; killed on teardown."""
    procs: list[SpawnedFixture] = []

    def spawn(*extra_args: str, handshake: bool = True) -> SpawnedFixture:
        argv = [sys.executable, "-m", "syschaos.fixtures.copier", *extra_args]
        if handshake:
            argv.append("--handshake")
        proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                text=True)
        banner = proc.stdout.readline().strip()
        assert banner.startswith("READY"), banner
        wrapped = SpawnedFixture(proc, banner)
        procs.append(wrapped)
        return wrapped

    yield spawn
    for fx in procs:
        fx.kill()


@pytest.fixture
def http_docroot(tmp_path):
    docroot = tmp_path / "docroot"
    docroot.mkdir()
    (docroot / "index.html").write_text("hello from the fixture\n")
    (docroot / "abc").write_text("abc body\n")
    return docroot


@pytest.fixture
def spawn_http(http_docroot):
    """Factory for fx-http servers; returns (SpawnedFixture, port)."""
    procs: list[SpawnedFixture] = []

    def spawn(*extra_args: str, docroot=None, drain: bool = True) -> tuple[SpawnedFixture, int]:
        port = free_port()
        argv = [sys.executable, "-m", "syschaos.fixtures.httpserver",
                "--port", str(port), "--docroot", str(docroot or http_docroot),
                *extra_args]
        proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                text=True)
        banner = proc.stdout.readline().strip()
        assert banner.startswith("LISTENING"), banner + proc.stderr.readline()
        wrapped = SpawnedFixture(proc, banner)
        if drain:
            wrapped.drain_stdout()  # request logs must never fill the pipe
        procs.append(wrapped)
        return wrapped, port

    yield spawn
    for fx in procs:
        fx.kill()


def wait_for(predicate, timeout: float = 30.0, interval: float = 0.02) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return False
