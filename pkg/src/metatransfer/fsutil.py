"""Atomic file output and content hashing."""

from __future__ import annotations

import hashlib
import os


def atomic_write(path: str, payload: bytes) -> None:
    """Write to a temp name next to ``path`` and rename on success."""
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def blob_hash(payload: bytes) -> str:
    """Git-style object id: sha1 over ``blob <len>\\0`` + content."""
    h = hashlib.sha1(b"blob %d\0" % len(payload))
    h.update(payload)
    return h.hexdigest()


def file_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return blob_hash(fh.read())
