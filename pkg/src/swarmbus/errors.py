"""Error type shared by every layer of the bus."""

from __future__ import annotations


class SwarmError(Exception):
    """A domain failure identified by a stable upper-case ``code``.

    Codes are part of the external contract (CLI output, HTTP error bodies,
    ERROR frames), so callers match on ``code`` rather than on message text.
    """

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)
