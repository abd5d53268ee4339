"""Passthrough file operations over a backing directory, with injection hooks.

A :class:`Session` exposes the primitive set a userspace filesystem would
implement (the method signatures follow the fusepy ``Operations`` class) and
maps each call 1:1 onto an OS call under ``root``. An optional
:class:`InjectionController` corrupts exactly one invocation of one primitive.

Workloads reach a session either through a real mountpoint (see
:mod:`faultfs.fuse_adapter`) or cooperatively: a process launched by the
campaign runner finds its session description in ``$FAULTFS_SESSION`` and
calls :func:`attach`.
"""
from __future__ import annotations

import json
import os
import stat
import threading
import time
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, SetupError
from .faultmodel import (FaultKind, FaultSignature, WriteOp, apply_fault,
                         corrupt_scalar_args, draw_parameters)

PRIMITIVES = ("open", "create", "read", "write", "truncate", "mknod", "chmod",
              "unlink", "rename", "getattr", "readdir", "mkdir", "rmdir",
              "fsync", "release")

SESSION_ENV = "FAULTFS_SESSION"

MKNOD_WIDTHS = (4, 8)  # mode_t, dev_t


def fault_rng(signature: FaultSignature) -> np.random.Generator:
    """PRNG stream used for the fault point; independent of target selection."""
    return np.random.default_rng(np.random.SeedSequence(signature.rng_seed, spawn_key=(1,)))


class InjectionController:
    """Decides which invocation of ``signature.primitive`` gets corrupted.

    Fires at most once. ``tick`` is atomic so concurrent request handlers
    see a single, totally ordered invocation count.
    """

    def __init__(self, signature: FaultSignature, target_index: int):
        if signature.primitive not in PRIMITIVES:
            raise ConfigError(f"unknown primitive {signature.primitive!r}")
        if target_index < 0:
            raise ConfigError("target_index must be >= 0")
        self.signature = signature
        self.target_primitive = signature.primitive
        self.target_index = int(target_index)
        self.counter = 0
        self.fired = False
        self._rng = fault_rng(signature)
        self._lock = threading.Lock()

    def tick(self, primitive: str) -> bool:
        if primitive != self.target_primitive:
            return False
        with self._lock:
            index = self.counter
            self.counter += 1
            if not self.fired and index == self.target_index:
                self.fired = True
                return True
        return False

    def draw(self, size: int) -> dict:
        with self._lock:
            return draw_parameters(self.signature.model, size, self._rng)


class SessionLog:
    """Append-only record of primitive invocations, one JSON object per line.

    Each record is flushed as it is written so a crashing workload leaves a
    complete prefix behind.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        self._fh = open(self.path, "a", encoding="utf-8") if self.path else None

    def append(self, primitive: str, args: dict, injected: bool = False,
               fault: dict | None = None) -> None:
        with self._lock:
            rec = {"seq": len(self.records), "primitive": primitive, "args": args,
                   "injected": injected, "t": time.time()}
            if fault is not None:
                rec["fault"] = fault
            self.records.append(rec)
            if self._fh:
                self._fh.write(json.dumps(rec) + "\n")
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh:
                self._fh.close()
                self._fh = None

    def count(self, primitive: str) -> int:
        return sum(r["primitive"] == primitive for r in self.records)

    @staticmethod
    def read(path: str | os.PathLike) -> list[dict]:
        p = Path(path)
        if not p.exists():
            return []
        out = []
        for line in p.read_text(encoding="utf-8").splitlines():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                break  # torn final line from a killed workload
        return out


class Session:
    """File operations under ``root``; see module docstring."""

    def __init__(self, root: str | os.PathLike,
                 controller: InjectionController | None = None,
                 log: SessionLog | None = None):
        root = os.path.abspath(root)
        if not os.path.isdir(root):
            raise SetupError(f"session root {root!r} does not exist")
        if not os.access(root, os.W_OK | os.X_OK):
            raise SetupError(f"session root {root!r} is not writable")
        self.root = root
        self.controller = controller
        self.log = log if log is not None else SessionLog()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self.log.close()

    def _full(self, path: str) -> str:
        return os.path.join(self.root, path.lstrip("/"))

    def _enter(self, primitive: str) -> bool:
        return self.controller.tick(primitive) if self.controller else False

    # -- data path -----------------------------------------------------

    def write(self, path, data, offset, fh):
        fire = self._enter("write")
        data = bytes(data)
        args = {"path": path, "offset": offset, "size": len(data),
                "crc32": zlib.crc32(data)}
        if not fire:
            self.log.append("write", args)
            return os.pwrite(fh, data, offset)
        op = WriteOp(path, offset, data)
        model = self.controller.signature.model
        params = self.controller.draw(len(data))
        faulted = apply_fault(op, model, params)
        self.log.append("write", args, injected=True,
                        fault={"model": model.kind.value, **params})
        if faulted.effective_payload:
            os.pwrite(fh, faulted.effective_payload, offset)
        return faulted.reported_size

    def read(self, path, size, offset, fh):
        self._enter("read")
        self.log.append("read", {"path": path, "offset": offset, "size": size})
        return os.pread(fh, size, offset)

    def truncate(self, path, length, fh=None):
        self._enter("truncate")
        self.log.append("truncate", {"path": path, "length": length})
        if fh is not None:
            os.ftruncate(fh, length)
        else:
            os.truncate(self._full(path), length)
        return 0

    # -- scalar-argument primitives -------------------------------------

    def _scalar_fault(self, primitive: str, args: tuple[int, ...],
                      widths: tuple[int, ...], logged: dict):
        """Return corrupted args, or None when the call must be dropped."""
        model = self.controller.signature.model
        if model.kind is FaultKind.DROPPED_WRITE:
            self.log.append(primitive, logged, injected=True,
                            fault={"model": model.kind.value})
            return None
        params = self.controller.draw(sum(widths))
        new = corrupt_scalar_args(args, params["start_bit"], params["n"], widths)
        self.log.append(primitive, logged, injected=True,
                        fault={"model": model.kind.value, **params,
                               "corrupted": list(new)})
        return new

    def mknod(self, path, mode, dev):
        fire = self._enter("mknod")
        logged = {"path": path, "mode": mode, "dev": dev}
        if fire:
            new = self._scalar_fault("mknod", (mode, dev), MKNOD_WIDTHS, logged)
            if new is None:
                return 0
            mode, dev = new
        else:
            self.log.append("mknod", logged)
        full = self._full(path)
        if stat.S_ISFIFO(mode):
            os.mkfifo(full, stat.S_IMODE(mode))
        else:
            os.mknod(full, mode, dev)
        return 0

    def chmod(self, path, mode):
        fire = self._enter("chmod")
        logged = {"path": path, "mode": mode}
        if fire:
            new = self._scalar_fault("chmod", (mode,), (4,), logged)
            if new is None:
                return 0
            (mode,) = new
        else:
            self.log.append("chmod", logged)
        os.chmod(self._full(path), mode)
        return 0

    # -- plain passthrough ---------------------------------------------

    def _plain(self, primitive: str, **args) -> None:
        self._enter(primitive)
        self.log.append(primitive, args)

    def open(self, path, flags):
        self._plain("open", path=path, flags=flags)
        return os.open(self._full(path), flags)

    def create(self, path, mode, fi=None):
        self._plain("create", path=path, mode=mode)
        return os.open(self._full(path), os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)

    def getattr(self, path, fh=None):
        self._plain("getattr", path=path)
        st = os.lstat(self._full(path))
        return {key: getattr(st, key) for key in (
            "st_atime", "st_ctime", "st_gid", "st_mode", "st_mtime",
            "st_nlink", "st_size", "st_uid")}

    def readdir(self, path, fh=None):
        self._plain("readdir", path=path)
        return [".", ".."] + sorted(os.listdir(self._full(path)))

    def mkdir(self, path, mode):
        self._plain("mkdir", path=path, mode=mode)
        return os.mkdir(self._full(path), mode)

    def rmdir(self, path):
        self._plain("rmdir", path=path)
        return os.rmdir(self._full(path))

    def unlink(self, path):
        self._plain("unlink", path=path)
        return os.unlink(self._full(path))

    def rename(self, old, new):
        self._plain("rename", old=old, new=new)
        return os.rename(self._full(old), self._full(new))

    def fsync(self, path, datasync, fh):
        self._plain("fsync", path=path)
        return os.fdatasync(fh) if datasync else os.fsync(fh)

    def release(self, path, fh):
        self._plain("release", path=path)
        return os.close(fh)


def mount_session(root, controller: InjectionController | None = None,
                  log_path: str | os.PathLike | None = None) -> Session:
    """Open a session; ``controller=None`` gives a pure profiling passthrough."""
    return Session(root, controller, SessionLog(log_path))


def write_session_spec(path, root, log_path, signature: FaultSignature | None = None,
                       target_index: int | None = None) -> None:
    spec = {"root": os.path.abspath(root), "log": os.path.abspath(log_path)}
    if signature is not None:
        spec["signature"] = signature.to_dict()
        spec["target_index"] = int(target_index)
    Path(path).write_text(json.dumps(spec), encoding="utf-8")


def attach(default_root: str | os.PathLike = ".") -> Session:
    """Session for a cooperating workload process.

    Reads the description named by ``$FAULTFS_SESSION``; without it the
    workload gets an unlogged passthrough over ``default_root``.
    """
    spec_path = os.environ.get(SESSION_ENV)
    if not spec_path:
        return Session(default_root)
    spec = json.loads(Path(spec_path).read_text(encoding="utf-8"))
    controller = None
    if "signature" in spec:
        controller = InjectionController(FaultSignature.from_dict(spec["signature"]),
                                         spec["target_index"])
    return mount_session(spec["root"], controller, spec.get("log"))


def session_path(session: Session, path: str | os.PathLike) -> str:
    """Translate an OS path into the session's namespace."""
    rel = os.path.relpath(os.path.abspath(path), session.root)
    if rel == ".." or rel.startswith(".." + os.sep):
        raise SetupError(f"{path!r} lies outside session root {session.root!r}")
    return "/" + rel


__all__ = ["PRIMITIVES", "InjectionController", "Session", "SessionLog",
           "attach", "mount_session", "session_path", "write_session_spec"]
