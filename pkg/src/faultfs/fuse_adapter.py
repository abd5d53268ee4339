"""Serve a :class:`~faultfs.interpose.Session` at a real mountpoint.

Optional: needs the ``fusepy`` package, the host's libfuse and permission
to mount. Nothing else in the package depends on it.
"""
from __future__ import annotations

import errno
import os

from .errors import SetupError
from .interpose import Session

REMEDIATION = ("install fusepy (pip install fusepy) and the host libfuse, make sure "
               "/dev/fuse is accessible and your user may mount (group 'fuse' or "
               "'user_allow_other' in /etc/fuse.conf)")


def _load_fuse():
    try:
        import fuse  # fusepy
    except (ImportError, OSError) as exc:
        raise SetupError(f"FUSE unavailable ({exc}); {REMEDIATION}") from exc
    return fuse


def fuse_available() -> bool:
    try:
        _load_fuse()
    except SetupError:
        return False
    return os.path.exists("/dev/fuse")


def make_operations(session: Session):
    """A fusepy ``Operations`` object delegating to ``session``."""
    fuse = _load_fuse()

    class _Ops(fuse.Operations):
        def __call__(self, op, *args):
            method = getattr(session, op, None)
            if method is None:
                raise fuse.FuseOSError(errno.ENOSYS)
            try:
                return method(*args)
            except OSError as exc:
                raise fuse.FuseOSError(exc.errno or errno.EIO) from exc

    return _Ops()


def fuse_adapter(session: Session, mountpoint: str | os.PathLike,
                 foreground: bool = True, **kwargs) -> None:
    """Mount and serve until unmounted (blocks when ``foreground``)."""
    fuse = _load_fuse()
    if not os.path.isdir(mountpoint):
        raise SetupError(f"mountpoint {mountpoint!r} is not a directory")
    try:
        fuse.FUSE(make_operations(session), str(mountpoint), foreground=foreground,
                  nothreads=False, **kwargs)
    except RuntimeError as exc:
        raise SetupError(f"mount at {mountpoint} failed ({exc}); {REMEDIATION}") from exc
    finally:
        session.close()
