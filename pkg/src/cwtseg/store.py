"""Exchange store: the shared drop-box through which checkpoints move.

Two backends satisfy the same contract: an in-process store for
deterministic tests and a directory-backed store for real multi-process
runs.  Writes are all-or-nothing (readers never observe partial content)
and the turn token mutates only through an atomic compare-and-swap.

The directory backend relies exclusively on POSIX atomic rename/link
primitives, so it stays correct on network filesystems that offer nothing
stronger than atomic rename.
"""

from __future__ import annotations

import abc
import os
import threading
import uuid
from pathlib import Path

__all__ = ["ExchangeStore", "InMemoryStore", "DirectoryStore", "TOKEN_NAME"]

TOKEN_NAME = "token"


class ExchangeStore(abc.ABC):
    """Blob namespace plus one compare-and-swappable turn token."""

    @abc.abstractmethod
    def put_atomic(self, name: str, data: bytes) -> None:
        """Store ``data`` under ``name``; replaces atomically if present."""

    @abc.abstractmethod
    def get(self, name: str) -> bytes:
        """Return the blob under ``name``; KeyError if absent."""

    @abc.abstractmethod
    def list(self) -> list[str]:
        """All stored names, sorted."""

    @abc.abstractmethod
    def swap_token(self, expected: str | None, new: str) -> bool:
        """Atomically replace the token text iff it currently equals ``expected``.

        ``expected=None`` means "create only if absent".  Returns False when
        the comparison fails, True on success.
        """


class InMemoryStore(ExchangeStore):
    def __init__(self):
        self._data: dict[str, bytes] = {}
        self._lock = threading.RLock()

    def put_atomic(self, name: str, data: bytes) -> None:
        with self._lock:
            self._data[name] = bytes(data)

    def get(self, name: str) -> bytes:
        with self._lock:
            if name not in self._data:
                raise KeyError(name)
            return self._data[name]

    def list(self) -> list[str]:
        with self._lock:
            return sorted(self._data)

    def swap_token(self, expected: str | None, new: str) -> bool:
        with self._lock:
            current = self._data.get(TOKEN_NAME)
            if expected is None:
                if current is not None:
                    return False
            else:
                if current is None or current.decode("utf-8") != expected:
                    return False
            self._data[TOKEN_NAME] = new.encode("utf-8")
            return True


class DirectoryStore(ExchangeStore):
    """Shared-directory store; blob names map to relative file paths."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root.resolve() not in p.parents and p != self.root.resolve():
            raise ValueError(f"name {name!r} escapes the store root")
        return p

    def put_atomic(self, name: str, data: bytes) -> None:
        path = self._path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".tmp.{os.getpid()}.{uuid.uuid4().hex}"
        try:
            tmp.write_bytes(data)
            os.replace(tmp, path)
        finally:
            tmp.unlink(missing_ok=True)

    def get(self, name: str) -> bytes:
        try:
            return self._path(name).read_bytes()
        except FileNotFoundError:
            raise KeyError(name) from None

    def list(self) -> list[str]:
        names = []
        for p in self.root.rglob("*"):
            if p.is_file() and not p.name.startswith(".tmp."):
                names.append(p.relative_to(self.root).as_posix())
        return sorted(names)

    def swap_token(self, expected: str | None, new: str) -> bool:
        token_path = self.root / TOKEN_NAME
        tmp = self.root / f".tmp.{os.getpid()}.{uuid.uuid4().hex}"
        tmp.write_bytes(new.encode("utf-8"))
        try:
            if expected is None:
                try:
                    os.link(tmp, token_path)  # fails atomically if token exists
                    return True
                except FileExistsError:
                    return False
            try:
                current = token_path.read_bytes().decode("utf-8")
            except FileNotFoundError:
                return False
            if current != expected:
                return False
            os.replace(tmp, token_path)
            tmp = None
            return True
        finally:
            if tmp is not None:
                Path(tmp).unlink(missing_ok=True)
