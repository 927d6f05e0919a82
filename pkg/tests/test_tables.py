"""Syscall/errno table lookups against independent kernel sources."""

import re

import pytest
from hypothesis import given, strategies as st

from syschaos.tables import (RELEVANT_SYSCALLS, INJECTION_ERRNOS, DelaySpec, ErrnoCode,
                             SyscallId, UnknownNameError, X86_64_SYSCALLS, errno_by_name,
                             load_syscall_table_csv, relevant_syscalls, syscall_by_name,
                             syscall_name)

KERNEL_HEADER = "/usr/include/x86_64-linux-gnu/asm/unistd_64.h"

# Frozen spot checks, copied by hand from the kernel's unistd_64.h.
KNOWN_NUMBERS = {
    "read": 0, "write": 1, "open": 2, "close": 3, "poll": 7,
    "select": 23, "sendfile": 40, "writev": 20, "readv": 19, "openat": 257,
}

# Frozen from the host errno listing (errno -l equivalents on x86-64 Linux).
KNOWN_ERRNOS = {"EPERM": 1, "ENOENT": 2, "EINTR": 4, "EIO": 5, "EACCES": 13, "ENOSYS": 38}


def test_known_syscall_numbers():
    for name, number in KNOWN_NUMBERS.items():
        assert syscall_by_name(name).number == number


def test_full_table_matches_kernel_header():
    header = {}
    try:
        with open(KERNEL_HEADER) as fh:
            for line in fh:
                m = re.match(r"#define __NR_(\w+)\s+(\d+)", line)
                if m:
                    header[m.group(1)] = int(m.group(2))
    except FileNotFoundError:
        pytest.skip("kernel header not installed")
    assert header == X86_64_SYSCALLS


def test_lookup_is_case_insensitive_and_canonical():
    sid = syscall_by_name("OPEN")
    assert sid == SyscallId("open", 2)


def test_unknown_syscall_lists_candidates():
    with pytest.raises(UnknownNameError) as excinfo:
        syscall_by_name("noatasyscall")
    assert excinfo.value.candidates  # nearest names offered
    with pytest.raises(UnknownNameError):
        syscall_by_name("read", arch="sparc99")


def test_errno_values():
    for name, value in KNOWN_ERRNOS.items():
        assert errno_by_name(name) == ErrnoCode(name, value)
    assert errno_by_name("eacces").name == "EACCES"


def test_unknown_errno():
    with pytest.raises(UnknownNameError):
        errno_by_name("EZZZ")


def test_paper_errnos_distinct():
    values = [errno_by_name(n).value for n in INJECTION_ERRNOS]
    assert len(set(values)) == len(values) == 6


def test_relevant_syscalls_exact_set():
    names = [s.name for s in relevant_syscalls()]
    assert names == list(RELEVANT_SYSCALLS)
    assert "open" in names and "sendfile64" in names and len(names) == 9
    assert "futex" not in names


def test_relevant_syscalls_all_resolve():
    for sid in relevant_syscalls():
        again = syscall_by_name(sid.name)
        assert again.number == sid.number


def test_sendfile64_alias_maps_to_sendfile_number():
    assert syscall_by_name("sendfile64").number == syscall_by_name("sendfile").number
    # reverse lookup stays canonical
    assert syscall_name(syscall_by_name("sendfile").number) == "sendfile"


def test_canonical_table_is_bijection():
    numbers = list(X86_64_SYSCALLS.values())
    assert len(numbers) == len(set(numbers))
    assert all(n >= 0 for n in numbers)


@given(st.sampled_from(sorted(X86_64_SYSCALLS)))
def test_lookup_idempotent(name):
    first = syscall_by_name(name)
    assert syscall_by_name(first.name) == first


def test_unknown_number_name():
    assert syscall_name(99999) == "unknown:99999"


def test_csv_override_registers_architecture(tmp_path):
    path = tmp_path / "mini.csv"
    path.write_text("# comment\nread,63\nwrite,64\n")
    load_syscall_table_csv("aarch64-mini", path)
    assert syscall_by_name("read", "aarch64-mini").number == 63
    assert syscall_by_name("WRITE", "aarch64-mini") == SyscallId("write", 64)


def test_csv_override_rejects_garbage(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("read,notanumber\n")
    with pytest.raises(ValueError):
        load_syscall_table_csv("badarch", path)


def test_type_invariants():
    with pytest.raises(ValueError):
        SyscallId("x", -1)
    with pytest.raises(ValueError):
        ErrnoCode("EX", 0)
    with pytest.raises(ValueError):
        DelaySpec(-5)
    assert DelaySpec(0).millis == 0
