"""Byte-level tokenization and streaming JSONL corpus / score-file I/O.

Token ids 0..255 are raw byte values; 256 and 257 are the BOS/EOS framing
markers. Corpus files are JSONL, one object per line, UTF-8; the ``text``
field is interpreted as its UTF-8 byte sequence. Files written by the CLI
may start with a single ``{"_provenance": ...}`` object, which readers skip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Protocol

BYTE_VALUES = 256
BOS_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


class CorpusFormatError(ValueError):
    """A corpus or score line could not be parsed; carries the line number."""

    def __init__(self, path: str | Path, line_no: int, reason: str):
        self.path = str(path)
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}:{line_no}: {reason}")


class DuplicateIdError(ValueError):
    """The same record id occurred twice in one corpus file."""

    def __init__(self, path: str | Path, record_id: str, line_no: int):
        self.path = str(path)
        self.record_id = record_id
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: duplicate record id {record_id!r}")


class FramingError(ValueError):
    """A token sequence lacks valid BOS/EOS framing."""


@dataclass(frozen=True)
class CorpusRecord:
    """One corpus record. ``label`` is ground truth for evaluation only and
    must never influence scoring."""

    id: str
    text: bytes
    label: str | None = None


@dataclass(frozen=True)
class TokenSequence:
    """A record's tokens: BOS, then text bytes, then EOS unless truncated."""

    ids: tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)


def encode(text: bytes, context_len: int) -> TokenSequence:
    """Frame ``text`` as a token sequence, keeping at most ``context_len``
    bytes. Truncation keeps the leading bytes and drops the EOS marker."""
    if context_len < 0:
        raise ValueError(f"context_len must be >= 0, got {context_len}")
    truncated = len(text) > context_len
    body = tuple(text[:context_len])
    if truncated:
        return TokenSequence((BOS_ID,) + body, truncated=True)
    return TokenSequence((BOS_ID,) + body + (EOS_ID,), truncated=False)


def decode(seq: TokenSequence) -> bytes:
    """Invert :func:`encode` for well-formed sequences."""
    ids = seq.ids
    if not ids or ids[0] != BOS_ID:
        raise FramingError("sequence does not start with BOS")
    if seq.truncated:
        body = ids[1:]
    else:
        if ids[-1] != EOS_ID:
            raise FramingError("non-truncated sequence does not end with EOS")
        body = ids[1:-1]
    if any(t >= BYTE_VALUES for t in body):
        raise FramingError("framing token inside the text body")
    return bytes(body)


def _parse_line(path: str | Path, line_no: int, line: str) -> dict | None:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(path, line_no, f"invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise CorpusFormatError(path, line_no, "expected a JSON object")
    if "_provenance" in obj:
        return None
    return obj


def read_corpus(path: str | Path) -> Iterator[CorpusRecord]:
    """Stream records from a JSONL corpus file, validating as it goes."""
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            obj = _parse_line(path, line_no, line)
            if obj is None:
                continue
            record_id = obj.get("id")
            if not isinstance(record_id, str) or not record_id:
                raise CorpusFormatError(path, line_no, "missing or empty 'id'")
            text = obj.get("text")
            if not isinstance(text, str):
                raise CorpusFormatError(path, line_no, "missing 'text'")
            label = obj.get("label")
            if label is not None and not isinstance(label, str):
                raise CorpusFormatError(path, line_no, "'label' must be a string")
            if record_id in seen:
                raise DuplicateIdError(path, record_id, line_no)
            seen.add(record_id)
            yield CorpusRecord(id=record_id, text=text.encode("utf-8"), label=label)


def corpus_line(record: CorpusRecord) -> str:
    """Canonical JSON line for a corpus record (id, text, label)."""
    obj: dict = {"id": record.id, "text": record.text.decode("utf-8")}
    if record.label is not None:
        obj["label"] = record.label
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_corpus(
    path: str | Path,
    records: Iterable[CorpusRecord],
    provenance: dict | None = None,
) -> int:
    """Write records as JSONL in input order; returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        if provenance is not None:
            handle.write(json.dumps({"_provenance": provenance}, sort_keys=True))
            handle.write("\n")
        for record in records:
            handle.write(corpus_line(record))
            handle.write("\n")
            count += 1
    return count


class JsonLine(Protocol):
    def json_line(self) -> str: ...


def write_scores(
    path: str | Path,
    records: Iterable[JsonLine],
    provenance: dict | None = None,
) -> int:
    """Write score-like records (anything with a ``json_line`` method) as
    JSONL in input order; returns the count written."""
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        if provenance is not None:
            handle.write(json.dumps({"_provenance": provenance}, sort_keys=True))
            handle.write("\n")
        for record in records:
            handle.write(record.json_line())
            handle.write("\n")
            count += 1
    return count
