"""
Capture backend на FUSE: out монтируется как passthrough к скрытому каталогу,
каждый созданный через точку монтирования файл записывается.

Нужны fusepy и fusermount; без них backend недоступен (UsageError в get_backend).
"""
import errno
import logging
import os
import shutil
import stat
import subprocess
import threading
import time
from pathlib import Path
from typing import Optional, Set

from fuse import FUSE, FuseOSError, Operations

import pallet_format as pf
from resilience import CaptureError, UsageError
from runner import SHIM_BACKEND, SHIM_BACKING_DIR, CaptureBackend, Workspace, snapshot_outputs

logger = logging.getLogger(__name__)

MOUNT_TIMEOUT = 10.0


class RecordingPassthrough(Operations):
    """Passthrough к backing-каталогу с учетом созданных файлов"""

    def __init__(self, root: str):
        self.root = root
        self.created: Set[str] = set()
        self.lock = threading.Lock()

    def _full_path(self, partial: str) -> str:
        if partial.startswith("/"):
            partial = partial[1:]
        return os.path.join(self.root, partial)

    def _record(self, path: str) -> None:
        with self.lock:
            self.created.add(path.lstrip("/"))

    def _forget(self, path: str) -> None:
        rel = path.lstrip("/")
        with self.lock:
            self.created = {p for p in self.created if p != rel and not p.startswith(rel + "/")}

    # Файловая система

    def access(self, path, mode):
        if not os.access(self._full_path(path), mode):
            raise FuseOSError(errno.EACCES)

    def chmod(self, path, mode):
        return os.chmod(self._full_path(path), mode)

    def chown(self, path, uid, gid):
        return os.chown(self._full_path(path), uid, gid)

    def getattr(self, path, fh=None):
        st = os.lstat(self._full_path(path))
        return dict((key, getattr(st, key)) for key in (
            "st_atime", "st_ctime", "st_gid", "st_mode", "st_mtime", "st_nlink", "st_size", "st_uid"))

    def readdir(self, path, fh):
        yield from [".", "..", *os.listdir(self._full_path(path))]

    def readlink(self, path):
        return os.readlink(self._full_path(path))

    def mknod(self, path, mode, dev):
        self._record(path)
        return os.mknod(self._full_path(path), mode, dev)

    def mkdir(self, path, mode):
        return os.mkdir(self._full_path(path), mode)

    def rmdir(self, path):
        self._forget(path)
        return os.rmdir(self._full_path(path))

    def statfs(self, path):
        stv = os.statvfs(self._full_path(path))
        return dict((key, getattr(stv, key)) for key in (
            "f_bavail", "f_bfree", "f_blocks", "f_bsize", "f_favail",
            "f_ffree", "f_files", "f_flag", "f_frsize", "f_namemax"))

    def unlink(self, path):
        self._forget(path)
        return os.unlink(self._full_path(path))

    def symlink(self, name, target):
        self._record(name)
        return os.symlink(target, self._full_path(name))

    def rename(self, old, new):
        old_rel, new_rel = old.lstrip("/"), new.lstrip("/")
        with self.lock:
            moved = set()
            for p in self.created:
                if p == old_rel:
                    moved.add(new_rel)
                elif p.startswith(old_rel + "/"):
                    moved.add(new_rel + p[len(old_rel):])
                else:
                    moved.add(p)
            self.created = moved
        return os.rename(self._full_path(old), self._full_path(new))

    def link(self, target, name):
        self._record(target)
        return os.link(self._full_path(name), self._full_path(target))

    def utimens(self, path, times=None):
        return os.utime(self._full_path(path), times)

    # Файлы

    def open(self, path, flags):
        if flags & os.O_CREAT:
            self._record(path)
        return os.open(self._full_path(path), flags)

    def create(self, path, mode, fi=None):
        self._record(path)
        return os.open(self._full_path(path), os.O_WRONLY | os.O_CREAT, mode)

    def read(self, path, length, offset, fh):
        os.lseek(fh, offset, os.SEEK_SET)
        return os.read(fh, length)

    def write(self, path, buf, offset, fh):
        os.lseek(fh, offset, os.SEEK_SET)
        return os.write(fh, buf)

    def truncate(self, path, length, fh=None):
        with open(self._full_path(path), "r+") as f:
            f.truncate(length)

    def flush(self, path, fh):
        return os.fsync(fh)

    def release(self, path, fh):
        return os.close(fh)

    def fsync(self, path, fdatasync, fh):
        return self.flush(path, fh)


def _fusermount() -> str:
    for name in ("fusermount3", "fusermount"):
        found = shutil.which(name)
        if found:
            return found
    raise UsageError("fusermount не найден, backend passthrough_shim недоступен")


class FusePassthroughBackend(CaptureBackend):
    """Монтирует out на время выполнения команды"""
    name = SHIM_BACKEND

    def __init__(self):
        self.operations: Optional[RecordingPassthrough] = None
        self.thread: Optional[threading.Thread] = None
        self.backing: Optional[Path] = None

    def start(self, workspace: Workspace) -> None:
        _fusermount()
        self.backing = workspace.root / SHIM_BACKING_DIR
        self.backing.mkdir()
        self.operations = RecordingPassthrough(str(self.backing))
        mountpoint = str(workspace.output_dir)
        self.thread = threading.Thread(
            target=FUSE,
            args=(self.operations, mountpoint),
            kwargs={"foreground": True, "nothreads": True},
            daemon=True,
        )
        self.thread.start()

        deadline = time.monotonic() + MOUNT_TIMEOUT
        while not os.path.ismount(mountpoint):
            if not self.thread.is_alive() or time.monotonic() > deadline:
                raise CaptureError(f"не удалось смонтировать {mountpoint}")
            time.sleep(0.01)
        logger.debug(f"Смонтирован passthrough {mountpoint} -> {self.backing}")

    def stop(self, workspace: Workspace) -> None:
        if self.thread is None:
            return
        mountpoint = str(workspace.output_dir)
        if os.path.ismount(mountpoint):
            result = subprocess.run([_fusermount(), "-u", mountpoint], capture_output=True, text=True)
            if result.returncode != 0:
                logger.error(f"Не удалось отмонтировать {mountpoint}: {result.stderr.strip()}")
        self.thread.join(timeout=MOUNT_TIMEOUT)
        self.thread = None

    def collect(self, workspace: Workspace) -> pf.StagingPallet:
        """Файлы из backing; набор обязан совпасть с записанным через точку монтирования"""
        if self.backing is None or self.operations is None:
            raise CaptureError("backend не был запущен")
        staging = pf.StagingPallet(root=self.backing, deterministic=workspace.staging.deterministic)
        snapshot_outputs(staging, self.backing)

        created = set(self.operations.created)
        recorded = {p for p in created if (self.backing / p).is_file()}
        mismatch = sorted((created - recorded) | (recorded ^ set(staging.pending)))
        if mismatch:
            raise CaptureError(f"файлы в out не совпадают с созданными через точку монтирования: {mismatch}",
                               paths=mismatch)
        return staging
