"""16-byte endpoint addresses with the colon-separated hex text form."""

from __future__ import annotations

from dataclasses import dataclass

GID_LEN = 16


@dataclass(frozen=True, order=True)
class Gid:
    """Opaque 16-byte global endpoint address.

    The text form is sixteen colon-separated hex bytes (``fe:80:...:01``)
    and round-trips losslessly.
    """

    raw: bytes

    def __post_init__(self):
        if not isinstance(self.raw, bytes) or len(self.raw) != GID_LEN:
            raise ValueError(f"gid must be exactly {GID_LEN} bytes, got {self.raw!r}")

    @classmethod
    def from_text(cls, text: str) -> "Gid":
        parts = text.split(":")
        if len(parts) != GID_LEN:
            raise ValueError(f"gid text must have {GID_LEN} hex bytes, got {len(parts)}")
        try:
            raw = bytes(int(p, 16) for p in parts)
        except ValueError as exc:
            raise ValueError(f"malformed gid text {text!r}") from exc
        if any(len(p) != 2 for p in parts):
            raise ValueError(f"gid bytes must be two hex digits each: {text!r}")
        return cls(raw)

    @classmethod
    def for_host(cls, index: int) -> "Gid":
        """Deterministic link-local style gid for simulated host ``index``."""
        if index < 0:
            raise ValueError("host index must be non-negative")
        return cls(b"\xfe\x80" + b"\x00" * 6 + index.to_bytes(8, "big"))

    @property
    def text(self) -> str:
        return ":".join(f"{b:02x}" for b in self.raw)

    def __str__(self) -> str:
        return self.text

    def __repr__(self) -> str:
        return f"Gid({self.text})"
