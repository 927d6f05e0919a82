"""Deterministic target programs for tests and experiments.

Two fixtures are shipped as console scripts:

``fx-copy``
    Copies bytes from /dev/zero to /dev/null with an exact, pre-declared
    number of read and write syscalls, and reports per-errno failure counts
    on exit. Stands in for syscall-heavy batch workloads.

``fx-http``
    A minimal serial HTTP/1.1 file server whose request handling
    deliberately issues one classic ``open`` syscall per request and whose
    accept loop sits in the classic ``select`` syscall, so error injection
    on those calls is observable at the HTTP level (403/404/500 mapping,
    crash-on-select).

Both support a signal handshake (``--handshake``) so a harness can attach
a tracer before the interesting work starts: the fixture prints a READY
line, waits for SIGUSR1, runs, then waits for SIGUSR2 before printing its
summary and exiting. Their stdout is deterministic given the same inputs
and injected faults.
"""

FIXTURE_NAMES = ("copier", "http")
