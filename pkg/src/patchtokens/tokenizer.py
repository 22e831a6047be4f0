"""Closed-vocabulary text tokenizer with byte fallback.

Pieces are words or single punctuation marks with an optional leading
space (``" square"``, ``'"'``).  Pieces seen in the task templates get their
own id; anything else decomposes into raw UTF-8 byte tokens, so arbitrary
category names (COCO) still round-trip.
"""

from __future__ import annotations

import re
from functools import lru_cache

PAD, BOS, EOS, ASSISTANT = "<pad>", "<bos>", "<eos>", "<assistant>"
SPECIALS = (PAD, BOS, EOS, ASSISTANT)
N_BYTES = 256

_PIECE_RE = re.compile(r" ?[A-Za-z0-9_]+| ?[^\sA-Za-z0-9_]|\s+")

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
KINDS = ("square", "circle", "triangle")

_SEED_TEXT = [
    'Please carefully check the image and detect the object this sentence describes: "the x".',
    'Please carefully check the image and detect the following objects: ["x", "y"].',
    "Please describe this image.",
    'The "x" refers to  in this image.',
    'In this image, there are 0 "x" (none), 1 2 3 4 5 6 7 8 9 and a an there is.',
    "There is a x (), a y () and a z ().",
    " ".join(COLORS + KINDS),
]


def split_pieces(text: str) -> list[str]:
    return _PIECE_RE.findall(text)


@lru_cache(maxsize=1)
def _word_pieces() -> tuple[str, ...]:
    pieces: set[str] = set()
    for line in _SEED_TEXT:
        for p in split_pieces(line):
            pieces.add(p)
            pieces.add(p.lstrip(" ") or p)
            if not p.startswith(" ") and not p.isspace():
                pieces.add(" " + p)
    return tuple(sorted(pieces))


class TextTokenizer:
    """Maps text to ids in ``[0, size)``; the same instance is shared everywhere."""

    def __init__(self) -> None:
        self.specials = list(SPECIALS)
        self.byte_offset = len(self.specials)
        self.word_offset = self.byte_offset + N_BYTES
        self.words = list(_word_pieces())
        self._word_id = {w: self.word_offset + i for i, w in enumerate(self.words)}

    @property
    def size(self) -> int:
        return self.word_offset + len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def assistant_id(self) -> int:
        return 3

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in split_pieces(text):
            wid = self._word_id.get(piece)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(self.byte_offset + b for b in piece.encode("utf-8"))
        return ids

    def decode(self, ids, n_visual: int | None = None) -> str:
        """Inverse of :meth:`encode`; visual ids render as ``<VRT_k>``."""
        out: list[str] = []
        buf = bytearray()

        def flush() -> None:
            if buf:
                out.append(buf.decode("utf-8", errors="replace"))
                buf.clear()

        for i in ids:
            i = int(i)
            if i < self.byte_offset:
                flush()
                if i != self.pad_id:
                    out.append(self.specials[i])
            elif i < self.word_offset:
                buf.append(i - self.byte_offset)
            elif i < self.size:
                flush()
                out.append(self.words[i - self.word_offset])
            else:
                flush()
                k = i - self.size
                if n_visual is not None and k >= n_visual:
                    out.append(f"<BAD_{i}>")
                else:
                    out.append(f"<VRT_{k}>")
        flush()
        return "".join(out)
