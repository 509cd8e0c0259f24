"""Subject-indexed value stores.

Every personal value the deployment keeps lives in one of these, keyed by
data subject, so erasure and residual scans can walk them exhaustively.
"""

from __future__ import annotations

import os
import threading
from pathlib import Path
from typing import Optional
from urllib.parse import quote, unquote

from ..errors import SwarmError


class MemoryStore:
    def __init__(self, name: str):
        self.name = name
        self.available = True
        self._items: dict[str, dict[str, bytes]] = {}
        self._lock = threading.RLock()

    def _check(self) -> None:
        if not self.available:
            raise SwarmError("STORE_UNAVAILABLE", self.name)

    def put(self, subject: str, key: str, data: bytes) -> None:
        self._check()
        with self._lock:
            self._items.setdefault(subject, {})[key] = bytes(data)

    def get(self, subject: str, key: str) -> bytes:
        self._check()
        with self._lock:
            try:
                return self._items[subject][key]
            except KeyError:
                raise SwarmError("UNKNOWN_ITEM", f"{self.name}/{key}") from None

    def delete(self, subject: str, key: str) -> bool:
        self._check()
        with self._lock:
            items = self._items.get(subject, {})
            found = items.pop(key, None) is not None
            if not items:
                self._items.pop(subject, None)
            return found

    def keys(self, subject: str) -> list[str]:
        self._check()
        with self._lock:
            return sorted(self._items.get(subject, {}))

    def subjects(self) -> list[str]:
        self._check()
        with self._lock:
            return sorted(self._items)

    def delete_subject(self, subject: str) -> int:
        self._check()
        with self._lock:
            return len(self._items.pop(subject, {}))

    def scan(self, subject: str) -> int:
        return len(self.keys(subject))


class FileStore:
    """``<root>/<quoted subject>/<quoted key>``, one file per value."""

    def __init__(self, name: str, root: os.PathLike):
        self.name = name
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.available = True
        self._lock = threading.RLock()

    def _check(self) -> None:
        if not self.available or not self.root.is_dir():
            raise SwarmError("STORE_UNAVAILABLE", self.name)

    def _dir(self, subject: str) -> Path:
        return self.root / quote(subject, safe="")

    def put(self, subject: str, key: str, data: bytes) -> None:
        self._check()
        with self._lock:
            d = self._dir(subject)
            d.mkdir(exist_ok=True)
            path = d / quote(key, safe="")
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)

    def get(self, subject: str, key: str) -> bytes:
        self._check()
        try:
            return (self._dir(subject) / quote(key, safe="")).read_bytes()
        except FileNotFoundError:
            raise SwarmError("UNKNOWN_ITEM", f"{self.name}/{key}") from None

    def delete(self, subject: str, key: str) -> bool:
        self._check()
        with self._lock:
            d = self._dir(subject)
            try:
                (d / quote(key, safe="")).unlink()
            except FileNotFoundError:
                return False
            if d.is_dir() and not any(d.iterdir()):
                d.rmdir()
            return True

    def keys(self, subject: str) -> list[str]:
        self._check()
        d = self._dir(subject)
        if not d.is_dir():
            return []
        return sorted(unquote(p.name) for p in d.iterdir() if not p.name.endswith(".tmp"))

    def subjects(self) -> list[str]:
        self._check()
        return sorted(unquote(p.name) for p in self.root.iterdir() if p.is_dir())

    def delete_subject(self, subject: str) -> int:
        self._check()
        with self._lock:
            d = self._dir(subject)
            if not d.is_dir():
                return 0
            n = 0
            for p in d.iterdir():
                p.unlink()
                n += 0 if p.name.endswith(".tmp") else 1
            d.rmdir()
            return n

    def scan(self, subject: str) -> int:
        return len(self.keys(subject))


def make_store(name: str, data_dir: Optional[os.PathLike]):
    if data_dir is None:
        return MemoryStore(name)
    return FileStore(name, Path(data_dir) / "stores" / name)
