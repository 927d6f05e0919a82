"""fx-http: minimal serial HTTP/1.1 file server with a pinned syscall profile.

Per request the server issues exactly one classic ``open`` syscall on the
requested docroot file (via the raw syscall, since CPython's own file I/O
goes through ``openat``) and maps the open failure errno to the response
status: EACCES -> 403, ENOENT -> 404, anything else -> 500; success -> 200.
No caching, so a perturbation on ``open`` affects every request.

The accept loop waits in the classic ``select`` syscall (again raw; the
stdlib would use ``pselect6``). With --crash-on-select-error any select
failure aborts the process immediately with exit code 70, which is the
crash scenario a resilience experiment wants to be able to provoke.

Requests are handled one at a time and logged one line each to stdout:
``ts method path status latency_ms``.
"""

from __future__ import annotations

import argparse
import ctypes
import errno as errno_mod
import os
import signal
import socket
import sys
import time

SYS_OPEN = 2
SYS_SELECT = 23
CRASH_EXIT = 70

_libc = ctypes.CDLL("libc.so.6", use_errno=True)
_libc.syscall.restype = ctypes.c_long


class _Timeval(ctypes.Structure):
    _fields_ = [("tv_sec", ctypes.c_long), ("tv_usec", ctypes.c_long)]


def raw_open(path: bytes, flags: int) -> tuple[int, int]:
    """Classic open(2). Returns (fd, 0) or (-1, errno)."""
    ctypes.set_errno(0)
    fd = _libc.syscall(ctypes.c_long(SYS_OPEN), ctypes.c_char_p(path),
                       ctypes.c_int(flags), ctypes.c_int(0))
    if fd < 0:
        return -1, ctypes.get_errno()
    return int(fd), 0


def raw_select_readable(fd: int, timeout_ms: int) -> tuple[int, int]:
    """Classic select(2) on one fd. Returns (nready, 0) or (-1, errno)."""
    nwords = fd // 64 + 1
    fdset = (ctypes.c_ulong * nwords)()
    fdset[fd // 64] = 1 << (fd % 64)
    tv = _Timeval(timeout_ms // 1000, (timeout_ms % 1000) * 1000)
    ctypes.set_errno(0)
    ret = _libc.syscall(ctypes.c_long(SYS_SELECT), ctypes.c_int(fd + 1),
                        ctypes.byref(fdset), None, None, ctypes.byref(tv))
    if ret < 0:
        return -1, ctypes.get_errno()
    return int(ret), 0


_REASONS = {200: "OK", 403: "Forbidden", 404: "Not Found", 500: "Internal Server Error"}


def _status_for_errno(err: int) -> int:
    if err == errno_mod.EACCES:
        return 403
    if err == errno_mod.ENOENT:
        return 404
    return 500


def _read_request(conn: socket.socket) -> bytes:
    conn.settimeout(5.0)
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = conn.recv(4096)
        if not chunk:
            break
        data += chunk
        if len(data) > 65536:
            break
    return data


def _handle(conn: socket.socket, docroot: str) -> tuple[str, str, int]:
    raw = _read_request(conn)
    if not raw:
        return "-", "-", 0
    request_line = raw.split(b"\r\n", 1)[0].decode("latin-1", "replace")
    parts = request_line.split()
    method, target = (parts[0], parts[1]) if len(parts) >= 2 else ("-", "/")
    path = target.split("?", 1)[0]
    rel = path.lstrip("/") or "index.html"

    if ".." in rel.split("/"):
        status, body = 404, b"bad path\n"
    else:
        fd, err = raw_open(os.path.join(docroot, rel).encode(), os.O_RDONLY)
        if fd < 0:
            status = _status_for_errno(err)
            body = f"open failed: {errno_mod.errorcode.get(err, err)}\n".encode()
        else:
            status = 200
            chunks = []
            try:
                while True:
                    chunk = os.read(fd, 65536)
                    if not chunk:
                        break
                    chunks.append(chunk)
                body = b"".join(chunks)
            except OSError:
                status, body = 500, b"read failed\n"
            finally:
                os.close(fd)

    head = (f"HTTP/1.1 {status} {_REASONS.get(status, 'Error')}\r\n"
            f"Content-Length: {len(body)}\r\n"
            f"Content-Type: text/plain\r\n"
            f"Connection: close\r\n\r\n").encode()
    try:
        conn.sendall(head + body)
    except OSError:
        pass
    return method, path, status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fx-http", description=__doc__)
    parser.add_argument("--port", type=int, required=True)
    parser.add_argument("--docroot", required=True)
    parser.add_argument("--crash-on-select-error", action="store_true",
                        help="abort the process on any select error")
    parser.add_argument("--select-timeout-ms", type=int, default=50)
    parser.add_argument("--tag", default=None, help="inert marker to make the cmdline searchable")
    args = parser.parse_args(argv)

    if not os.path.isdir(args.docroot):
        print(f"docroot {args.docroot!r} is not a directory", file=sys.stderr)
        return 2

    stop = []
    signal.signal(signal.SIGTERM, lambda *_: stop.append(1))
    signal.signal(signal.SIGINT, lambda *_: stop.append(1))

    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        listener.bind(("127.0.0.1", args.port))
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        return 2
    listener.listen(128)
    print(f"LISTENING port={listener.getsockname()[1]} pid={os.getpid()}", flush=True)

    while not stop:
        nready, err = raw_select_readable(listener.fileno(), args.select_timeout_ms)
        if nready < 0:
            if args.crash_on_select_error:
                try:
                    sys.stderr.write(f"select failed: {errno_mod.errorcode.get(err, err)}, aborting\n")
                    sys.stderr.flush()
                except OSError:
                    pass
                os._exit(CRASH_EXIT)
            continue  # resilient mode: treat as a spurious wakeup
        if nready == 0:
            continue
        t0 = time.monotonic()
        try:
            conn, _ = listener.accept()
        except OSError:
            continue
        try:
            method, path, status = _handle(conn, args.docroot)
        finally:
            conn.close()
        latency_ms = (time.monotonic() - t0) * 1000.0
        print(f"{time.time():.3f} {method} {path} {status} {latency_ms:.1f}", flush=True)

    listener.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
