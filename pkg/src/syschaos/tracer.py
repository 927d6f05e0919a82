"""Black-box syscall tracing and fault injection via ptrace.

A :class:`TracerSession` seizes a target process (and optionally its
descendants), observes every syscall entry/exit, and, while a
:class:`PerturbationSpec` is active, delays matching syscalls and/or forces
them to fail with an injected errno. Injection works the standard tracer
way: at syscall entry the syscall number is rewritten to an invalid one so
the kernel performs no action, and at syscall exit the return register is
overwritten with ``-errno``. The real operation therefore never executes.

All ptrace requests must come from the thread that attached, so each
session runs a dedicated tracer thread; the public methods just post
commands to it and are safe to call from anywhere. Stops are collected by
polling waitpid(WNOHANG) per traced pid: waiting on -1 would steal exit
statuses from unrelated children of this process (subprocess helpers,
other sessions).

Caveat for in-process targets: if the traced target is also a direct child
of this process, the tracing loop consumes its exit status, so read the
exit code from :attr:`TracerSession.root_exit` rather than from
``Popen.returncode``.
"""

from __future__ import annotations

import ctypes
import errno as errno_mod
import os
import signal
import threading
import time
from dataclasses import dataclass

from .tables import DEFAULT_ARCH, DelaySpec, ErrnoCode, SyscallId, reverse_syscall_table

PTRACE_GETREGS = 12
PTRACE_SETREGS = 13
PTRACE_DETACH = 17
PTRACE_SYSCALL = 24
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201
PTRACE_SEIZE = 0x4206
PTRACE_INTERRUPT = 0x4207

PTRACE_O_TRACESYSGOOD = 0x01
PTRACE_O_TRACEFORK = 0x02
PTRACE_O_TRACEVFORK = 0x04
PTRACE_O_TRACECLONE = 0x08

PTRACE_EVENT_FORK = 1
PTRACE_EVENT_VFORK = 2
PTRACE_EVENT_CLONE = 3
PTRACE_EVENT_STOP = 128

_WALL = 0x40000000  # waitpid __WALL: also wait for clone children (threads)

_U64 = 1 << 64
_SYSCALL_TRAP = signal.SIGTRAP | 0x80  # with PTRACE_O_TRACESYSGOOD
_ENTRY_RAX = _U64 - errno_mod.ENOSYS  # kernel sets rax=-ENOSYS at syscall entry
_INVALID_SYSCALL = _U64 - 1  # rewrite target; kernel executes nothing

_libc = ctypes.CDLL("libc.so.6", use_errno=True)
_libc.ptrace.argtypes = [ctypes.c_long, ctypes.c_long, ctypes.c_void_p, ctypes.c_void_p]
_libc.ptrace.restype = ctypes.c_long


class _Regs(ctypes.Structure):
    _fields_ = [(r, ctypes.c_ulonglong) for r in (
        "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8",
        "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags",
        "rsp", "ss", "fs_base", "gs_base", "ds", "es", "fs", "gs")]


def _ptrace(request: int, pid: int, addr=None, data=None) -> int:
    ctypes.set_errno(0)
    ret = _libc.ptrace(request, pid, addr, data)
    if ret < 0:
        err = ctypes.get_errno()
        if err != 0:
            raise OSError(err, os.strerror(err))
    return ret


class TracerError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    """What to inject: target syscall, optional errno, optional delay.

    A spec with neither an error nor a delay is rejected at construction;
    it would be indistinguishable from normal execution.
    """

    syscall: SyscallId
    error: ErrnoCode | None = None
    delay: DelaySpec = DelaySpec(0)

    def __post_init__(self):
        if self.error is None and self.delay.millis == 0:
            raise ValueError(
                f"perturbation on {self.syscall.name!r} injects neither an error nor "
                "a delay; refusing a spec identical to normal execution"
            )

    def describe(self) -> str:
        err = self.error.name if self.error else "-"
        dly = f"{self.delay.millis}ms" if self.delay.millis else "-"
        return f"{self.syscall.name}/{err}/{dly}"


@dataclass(frozen=True)
class SyscallEvent:
    """One completed syscall: entry timestamp, identity, args, outcome."""

    timestamp: int  # monotonic ns at syscall entry
    pid: int
    syscall: SyscallId
    args: tuple[int, ...]
    result: int  # retval, or -errno on failure
    faulted: bool
    delayed_by_ms: int
    duration_ns: int  # entry-to-exit wall time as seen by the tracer


@dataclass(frozen=True)
class TerminalEvent:
    """End-of-stream marker: target exit, kill, or tracer detach."""

    timestamp: int
    pid: int
    reason: str  # "exited" | "killed" | "detached"
    exit_code: int | None = None
    term_signal: int | None = None


class _PidState:
    __slots__ = ("in_syscall", "nr", "args", "entry_ns", "fault_errno", "delayed_ms")

    def __init__(self):
        self.in_syscall = None  # None until entry/exit phase is known
        self.nr = 0
        self.args = ()
        self.entry_ns = 0
        self.fault_errno = 0
        self.delayed_ms = 0


class TracerSession:
    """One attached target tree. Create via :func:`attach`."""

    def __init__(self, root_pid: int, follow_children: bool, record_events: bool, arch: str):
        self.root_pid = root_pid
        self.follow_children = follow_children
        self.record_events = record_events
        self._rev = reverse_syscall_table(arch)
        self._id_cache: dict[int, SyscallId] = {}
        self._spec: PerturbationSpec | None = None
        self._pids: dict[int, _PidState] = {}
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._counters: dict[str, int] = {}
        self._events: list[SyscallEvent | TerminalEvent] = []
        self._stream_done = False
        self._detach_requested = threading.Event()
        self._ready = threading.Event()
        self._attach_error: BaseException | None = None
        self.root_exit: tuple[int | None, int | None] | None = None  # (code, signal)
        self._thread = threading.Thread(target=self._run, name=f"tracer-{root_pid}", daemon=True)

    # -- public control surface (thread-safe) --------------------------

    @property
    def is_attached(self) -> bool:
        return self._thread.is_alive() and not self._stream_done

    def traced_pids(self) -> frozenset[int]:
        with self._lock:
            return frozenset(self._pids)

    def counters(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counters)

    @property
    def active_perturbation(self) -> PerturbationSpec | None:
        return self._spec

    def set_perturbation(self, spec: PerturbationSpec | None) -> None:
        """Activate injection from the next syscall entry on; None deactivates."""
        if spec is not None and not isinstance(spec, PerturbationSpec):
            raise TypeError(f"expected PerturbationSpec or None, got {type(spec).__name__}")
        self._spec = spec

    def event_stream(self):
        """Yield SyscallEvents in completion order, then one TerminalEvent."""
        if not self.record_events:
            raise TracerError("session was attached with record_events=False")
        i = 0
        while True:
            with self._cond:
                while i >= len(self._events) and not self._stream_done:
                    self._cond.wait(0.1)
                if i < len(self._events):
                    event = self._events[i]
                    i += 1
                else:
                    return
            yield event
            if isinstance(event, TerminalEvent):
                return

    def events(self) -> list[SyscallEvent | TerminalEvent]:
        with self._lock:
            return list(self._events)

    def wait(self, timeout: float | None = None) -> bool:
        """Wait for the target tree to end (or the session to detach)."""
        self._thread.join(timeout)
        return not self._thread.is_alive()

    def detach(self) -> None:
        """Stop tracing, leaving the target running unperturbed. Idempotent."""
        self._spec = None
        self._detach_requested.set()
        if self._thread.is_alive():
            self._thread.join(timeout=10.0)
            if self._thread.is_alive():
                raise TracerError("tracer thread failed to detach in time")

    # -- tracer thread --------------------------------------------------

    def _start(self) -> None:
        self._thread.start()
        self._ready.wait()
        if self._attach_error is not None:
            raise self._attach_error

    def _run(self) -> None:
        try:
            self._attach_root()
        except BaseException as exc:  # reported to the caller of attach()
            self._attach_error = exc
            self._ready.set()
            return
        self._ready.set()
        idle = 0
        while True:
            with self._lock:
                have_pids = bool(self._pids)
            if not have_pids:
                break
            if self._detach_requested.is_set():
                self._do_detach()
                break
            if self._poll_once():
                idle = 0
            else:
                idle += 1
                if idle > 200:
                    time.sleep(0.0003)
        self._finish_stream()

    def _attach_root(self) -> None:
        options = PTRACE_O_TRACESYSGOOD
        if self.follow_children:
            options |= PTRACE_O_TRACEFORK | PTRACE_O_TRACEVFORK | PTRACE_O_TRACECLONE
        try:
            _ptrace(PTRACE_SEIZE, self.root_pid, None, ctypes.c_void_p(options))
        except OSError as exc:
            if exc.errno == errno_mod.EPERM:
                raise PermissionError(
                    f"no tracing privilege over pid {self.root_pid} "
                    "(need root or CAP_SYS_PTRACE)") from None
            if exc.errno == errno_mod.ESRCH:
                raise ProcessLookupError(f"no such process: {self.root_pid}") from None
            raise
        with self._lock:
            self._pids[self.root_pid] = _PidState()
        # Force an initial stop so syscall-stepping can begin.
        _ptrace(PTRACE_INTERRUPT, self.root_pid)
        deadline = time.monotonic() + 5.0
        while time.monotonic() < deadline:
            wpid, status = os.waitpid(self.root_pid, os.WNOHANG | _WALL)
            if wpid:
                self._handle_stop(wpid, status)
                return
            time.sleep(0.001)
        raise TracerError(f"pid {self.root_pid} did not stop after PTRACE_INTERRUPT")

    def _poll_once(self) -> bool:
        progressed = False
        with self._lock:
            pids = list(self._pids)
        for pid in pids:
            try:
                wpid, status = os.waitpid(pid, os.WNOHANG | _WALL)
            except ChildProcessError:
                self._forget(pid)
                continue
            if wpid:
                self._handle_stop(wpid, status)
                progressed = True
        return progressed

    def _forget(self, pid: int) -> None:
        with self._lock:
            self._pids.pop(pid, None)

    def _resume(self, pid: int, sig: int = 0) -> None:
        try:
            _ptrace(PTRACE_SYSCALL, pid, None, ctypes.c_void_p(sig))
        except OSError:
            pass  # dying; the poll loop will reap its exit status

    def _handle_stop(self, pid: int, status: int, detaching: bool = False) -> None:
        if os.WIFEXITED(status) or os.WIFSIGNALED(status):
            if pid == self.root_pid:
                if os.WIFEXITED(status):
                    self.root_exit = (os.WEXITSTATUS(status), None)
                else:
                    self.root_exit = (None, os.WTERMSIG(status))
            self._forget(pid)
            return
        if not os.WIFSTOPPED(status):
            return
        sig = os.WSTOPSIG(status)
        event = status >> 16
        if sig == _SYSCALL_TRAP:
            self._handle_syscall_stop(pid)
            if not detaching:
                self._resume(pid)
            return
        if event in (PTRACE_EVENT_FORK, PTRACE_EVENT_VFORK, PTRACE_EVENT_CLONE):
            msg = ctypes.c_ulong()
            try:
                _ptrace(PTRACE_GETEVENTMSG, pid, None, ctypes.byref(msg))
                child = int(msg.value)
                with self._lock:
                    if child not in self._pids:
                        self._pids[child] = _PidState()
            except OSError:
                pass
            if not detaching:
                self._resume(pid)
            return
        if event == PTRACE_EVENT_STOP:
            # interrupt- or group-stop: nothing to deliver
            if not detaching:
                self._resume(pid)
            return
        # Plain signal-delivery-stop: pass the signal through untouched so
        # the target observes no behavioral change (handshake signals, etc).
        if not detaching:
            self._resume(pid, sig)

    def _syscall_id(self, nr: int) -> SyscallId:
        sid = self._id_cache.get(nr)
        if sid is None:
            name = self._rev.get(nr, f"unknown:{nr}")
            sid = SyscallId(name, nr)
            self._id_cache[nr] = sid
        return sid

    def _handle_syscall_stop(self, pid: int) -> None:
        state = self._pids.get(pid)
        if state is None:
            state = self._pids[pid] = _PidState()
        regs = _Regs()
        try:
            _ptrace(PTRACE_GETREGS, pid, None, ctypes.byref(regs))
        except OSError:
            return  # dying; the poll loop will reap it
        if state.in_syscall is None:
            # First stop for this pid. A genuine entry has rax == -ENOSYS;
            # anything else is the exit of a syscall whose entry predates
            # the attach, which we drop to keep entry/exit pairing aligned.
            if regs.rax != _ENTRY_RAX:
                state.in_syscall = False
                return
            state.in_syscall = False  # fall through to the entry branch

        if not state.in_syscall:
            state.in_syscall = True
            state.nr = regs.orig_rax
            state.args = (regs.rdi, regs.rsi, regs.rdx, regs.r10, regs.r8, regs.r9)
            state.entry_ns = time.monotonic_ns()
            state.fault_errno = 0
            state.delayed_ms = 0
            spec = self._spec
            if spec is not None and state.nr == spec.syscall.number:
                if spec.delay.millis > 0:
                    # Hold the tracee at the entry stop for the whole delay;
                    # entry-to-exit wall time then necessarily exceeds it.
                    state.delayed_ms = spec.delay.millis
                    time.sleep(spec.delay.millis / 1000.0)
                if spec.error is not None:
                    regs.orig_rax = _INVALID_SYSCALL
                    try:
                        _ptrace(PTRACE_SETREGS, pid, None, ctypes.byref(regs))
                        state.fault_errno = spec.error.value
                    except OSError:
                        pass
            return

        state.in_syscall = False
        if state.fault_errno:
            regs.rax = (_U64 - state.fault_errno) % _U64
            try:
                _ptrace(PTRACE_SETREGS, pid, None, ctypes.byref(regs))
            except OSError:
                return
            result = -state.fault_errno
            faulted = True
        else:
            raw = regs.rax
            result = raw - _U64 if raw >= (1 << 63) else raw
            faulted = False
        now = time.monotonic_ns()
        event = SyscallEvent(
            timestamp=state.entry_ns,
            pid=pid,
            syscall=self._syscall_id(state.nr),
            args=state.args,
            result=result,
            faulted=faulted,
            delayed_by_ms=state.delayed_ms,
            duration_ns=now - state.entry_ns,
        )
        state.fault_errno = 0
        with self._cond:
            self._counters[event.syscall.name] = self._counters.get(event.syscall.name, 0) + 1
            if self.record_events:
                self._events.append(event)
            self._cond.notify_all()

    def _do_detach(self) -> None:
        """Bring every tracee to a stop, complete any pending injection, detach."""
        with self._lock:
            pids = list(self._pids)
        for pid in pids:
            try:
                _ptrace(PTRACE_INTERRUPT, pid)
            except OSError:
                self._forget(pid)
        deadline = time.monotonic() + 2.0
        while time.monotonic() < deadline:
            with self._lock:
                remaining = list(self._pids)
            if not remaining:
                return
            progressed = False
            for pid in remaining:
                try:
                    wpid, status = os.waitpid(pid, os.WNOHANG | _WALL)
                except ChildProcessError:
                    self._forget(pid)
                    continue
                if not wpid:
                    continue
                progressed = True
                if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                    self._handle_stop(pid, status)
                    continue
                state = self._pids.get(pid)
                # A syscall-exit stop with a rewritten entry still needs its
                # fault applied, otherwise the target would see -ENOSYS.
                self._handle_stop(pid, status, detaching=True)
                if state is not None and state.in_syscall and state.fault_errno:
                    # Stopped at the rewritten entry's exit not yet seen:
                    # step once more to complete the injection.
                    self._resume(pid)
                    continue
                try:
                    _ptrace(PTRACE_DETACH, pid, None, None)
                except OSError:
                    pass
                self._forget(pid)
            if not progressed:
                time.sleep(0.001)
        # Deadline expired: force best-effort detach.
        with self._lock:
            leftovers = list(self._pids)
        for pid in leftovers:
            try:
                _ptrace(PTRACE_DETACH, pid, None, None)
            except OSError:
                pass
            self._forget(pid)

    def _finish_stream(self) -> None:
        now = time.monotonic_ns()
        if self._detach_requested.is_set():
            terminal = TerminalEvent(now, self.root_pid, "detached")
        elif self.root_exit and self.root_exit[1] is not None:
            terminal = TerminalEvent(now, self.root_pid, "killed", term_signal=self.root_exit[1])
        else:
            code = self.root_exit[0] if self.root_exit else None
            terminal = TerminalEvent(now, self.root_pid, "exited", exit_code=code)
        with self._cond:
            if self.record_events:
                self._events.append(terminal)
            self._stream_done = True
            self._cond.notify_all()


def attach(pid: int, follow_children: bool = True, record_events: bool = True,
           arch: str = DEFAULT_ARCH) -> TracerSession:
    """Attach to ``pid`` as a black box and start the tracing loop.

    The target is stopped and resumed transparently; with
    ``follow_children`` every subsequently forked or cloned descendant is
    traced too. Requires root or CAP_SYS_PTRACE.
    """
    session = TracerSession(pid, follow_children, record_events, arch)
    session._start()
    return session
