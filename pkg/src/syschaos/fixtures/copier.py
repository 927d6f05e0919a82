"""fx-copy: copy /dev/zero to /dev/null with exact syscall counts.

The work loop performs exactly the declared number of read and write
syscalls (one os.read / os.write each, no retries, no buffering), so a
tracer attached to this process can make exact-count assertions. Failures
are counted per errno and never retried; the write buffer is fixed up
front so a failed read does not change the write pattern.

The stdout summary contains only counts, never timings, so two runs with
the same inputs and the same injected faults are byte-identical.

Exit codes: 0 success, 5 first failed write under --abort-on-error,
2 usage error.
"""

from __future__ import annotations

import argparse
import errno as errno_mod
import os
import signal
import sys
import threading


def _spread(reads: int, writes: int):
    """Deterministic even interleave of 'r' and 'w' ops."""
    total = reads + writes
    for i in range(total):
        if i * reads // total != (i + 1) * reads // total:
            yield "r"
        else:
            yield "w"


def _errname(err: int) -> str:
    return errno_mod.errorcode.get(err, f"errno{err}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fx-copy", description=__doc__)
    parser.add_argument("--count", type=int, default=None, help="N read + N write syscalls")
    parser.add_argument("--reads", type=int, default=None, help="exact read count (with --writes)")
    parser.add_argument("--writes", type=int, default=None)
    parser.add_argument("--bs", type=int, default=4096, help="bytes per operation")
    parser.add_argument("--abort-on-error", action="store_true",
                        help="exit 5 on the first failed write")
    parser.add_argument("--handshake", action="store_true",
                        help="wait for SIGUSR1 before the loop and SIGUSR2 before the summary")
    parser.add_argument("--done-file", default=None,
                        help="touch this file when the loop finishes (open/close only)")
    parser.add_argument("--tag", default=None, help="inert marker to make the cmdline searchable")
    args = parser.parse_args(argv)

    if args.count is not None:
        reads, writes = args.count, args.count
    else:
        reads, writes = args.reads or 0, args.writes or 0
    if reads < 0 or writes < 0 or args.bs <= 0:
        parser.error("counts must be >= 0 and --bs > 0")

    go = threading.Event()
    finish = threading.Event()
    signal.signal(signal.SIGUSR1, lambda *_: go.set())
    signal.signal(signal.SIGUSR2, lambda *_: finish.set())

    zero_fd = os.open("/dev/zero", os.O_RDONLY)
    null_fd = os.open("/dev/null", os.O_WRONLY)
    buf = b"\x00" * args.bs

    print(f"READY pid={os.getpid()} reads={reads} writes={writes}", flush=True)
    if args.handshake:
        while not go.wait(0.02):
            pass

    reads_ok = writes_ok = 0
    read_errnos: dict[int, int] = {}
    write_errnos: dict[int, int] = {}
    exit_code = 0
    for op in _spread(reads, writes):
        if op == "r":
            try:
                os.read(zero_fd, args.bs)
                reads_ok += 1
            except OSError as exc:
                read_errnos[exc.errno] = read_errnos.get(exc.errno, 0) + 1
        else:
            try:
                os.write(null_fd, buf)
                writes_ok += 1
            except OSError as exc:
                write_errnos[exc.errno] = write_errnos.get(exc.errno, 0) + 1
                if args.abort_on_error:
                    exit_code = 5
                    break

    if args.done_file:
        os.close(os.open(args.done_file, os.O_WRONLY | os.O_CREAT, 0o644))

    if args.handshake:
        # Let the harness deactivate any write perturbation before the
        # summary below emits write syscalls of its own.
        while not finish.wait(0.02):
            pass

    reads_failed = sum(read_errnos.values())
    writes_failed = sum(write_errnos.values())
    lines = [
        f"reads_total={reads_ok + reads_failed} reads_ok={reads_ok} reads_failed={reads_failed}",
        f"writes_total={writes_ok + writes_failed} writes_ok={writes_ok} writes_failed={writes_failed}",
    ]
    for err in sorted(read_errnos):
        lines.append(f"read_errno_{_errname(err)}={read_errnos[err]}")
    for err in sorted(write_errnos):
        lines.append(f"write_errno_{_errname(err)}={write_errnos[err]}")
    lines.append(f"exit={exit_code}")
    try:
        print("\n".join(lines), flush=True)
    except OSError:
        pass  # stdout itself perturbed; the exit code still reports
    return exit_code


if __name__ == "__main__":
    sys.exit(main())
