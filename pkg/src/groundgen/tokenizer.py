"""Byte-level tokenizer with four reserved ids.

Ids 0-3 are PAD, BOS, EOS and RET; ids 4..259 are the raw UTF-8 bytes
shifted by four. No BOS/EOS is ever added implicitly.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from groundgen.errors import TokenDecodeError

PAD = 0
BOS = 1
EOS = 2
RET = 3
BYTE_OFFSET = 4
VOCAB_SIZE = 256 + BYTE_OFFSET

RESERVED = frozenset({PAD, BOS, EOS, RET})
SPECIAL_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", RET: "<ret>"}


def encode(text: str) -> tuple[int, ...]:
    return tuple(b + BYTE_OFFSET for b in text.encode("utf-8"))


def decode(ids: Iterable[int]) -> str:
    """Inverse of :func:`encode`.

    Raises TokenDecodeError if a reserved or out-of-range id is present or
    the bytes are not valid UTF-8.
    """
    raw = _to_bytes(ids)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TokenDecodeError(f"invalid UTF-8 byte run: {exc.reason}") from exc


def decode_lossy(ids: Iterable[int]) -> str:
    # free-running generation may emit byte runs that are not valid UTF-8
    return _to_bytes(ids).decode("utf-8", errors="replace")


def _to_bytes(ids: Iterable[int]) -> bytes:
    out = bytearray()
    for pos, t in enumerate(ids):
        t = int(t)
        if t < BYTE_OFFSET or t >= VOCAB_SIZE:
            name = SPECIAL_NAMES.get(t, str(t))
            raise TokenDecodeError(f"non-byte token {name} at position {pos}")
        out.append(t - BYTE_OFFSET)
    return bytes(out)


def token_repr(t: int) -> str:
    if t in SPECIAL_NAMES:
        return SPECIAL_NAMES[t]
    b = t - BYTE_OFFSET
    ch = chr(b)
    return repr(ch) if 32 <= b < 127 else f"0x{b:02x}"


def check_sequence(ids: Sequence[int]) -> None:
    """Validate id range and that PAD only appears as trailing padding."""
    seen_pad = False
    for t in ids:
        if not 0 <= t < VOCAB_SIZE:
            raise TokenDecodeError(f"token id {t} outside vocabulary")
        if t == PAD:
            seen_pad = True
        elif seen_pad:
            raise TokenDecodeError("PAD token inside sequence")
