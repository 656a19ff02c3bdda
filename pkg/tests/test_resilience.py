import errno

import pytest

from resilience import (
    CorruptionError,
    LockTimeoutError,
    NodeFailedError,
    NodeSpecError,
    PalletNotFoundError,
    UsageError,
    is_retryable_lock_error,
    retries_for_timeout,
    retry_with_backoff,
)
from runner import RunReport


def test_exit_codes():
    assert UsageError("x").exit_code == 2
    assert NodeSpecError("x").exit_code == 2
    assert PalletNotFoundError("a" * 64).exit_code == 3
    assert CorruptionError("x").exit_code == 4
    assert LockTimeoutError("x").exit_code == 1


def test_not_found_message():
    error = PalletNotFoundError("a" * 64)
    assert error.pallet_id == "a" * 64
    assert "a" * 64 in str(error)


def test_node_failed_exit_code():
    assert NodeFailedError("x", report=RunReport(exit_code=9)).exit_code == 9
    assert NodeFailedError("x").exit_code == 1
    assert NodeFailedError("x", report=RunReport(exit_code=0)).exit_code == 1


def test_retry_succeeds_after_failures():
    calls = []

    @retry_with_backoff(max_retries=3, delay=0.001)
    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise BlockingIOError(errno.EAGAIN, "busy")
        return "ok"

    assert flaky() == "ok"
    assert len(calls) == 3


def test_retry_gives_up():
    calls = []

    @retry_with_backoff(max_retries=2, delay=0.001)
    def always():
        calls.append(1)
        raise BlockingIOError(errno.EAGAIN, "busy")

    with pytest.raises(BlockingIOError):
        always()
    assert len(calls) == 3


def test_retry_check_stops_early():
    calls = []

    @retry_with_backoff(max_retries=5, delay=0.001, exceptions=(OSError,), retry_check=is_retryable_lock_error)
    def broken():
        calls.append(1)
        raise OSError(errno.EBADF, "bad fd")

    with pytest.raises(OSError):
        broken()
    assert len(calls) == 1


def test_is_retryable_lock_error():
    assert is_retryable_lock_error(BlockingIOError(errno.EWOULDBLOCK, "x"))
    assert is_retryable_lock_error(OSError(errno.EACCES, "x"))
    assert not is_retryable_lock_error(OSError(errno.ENOENT, "x"))
    assert not is_retryable_lock_error(ValueError("x"))


@pytest.mark.parametrize("timeout, expected", [(0.0, 0), (0.07, 1), (0.2, 2), (0.4, 3)])
def test_retries_for_timeout(timeout, expected):
    assert retries_for_timeout(timeout, delay=0.05, backoff=2.0, max_delay=2.0) == expected
