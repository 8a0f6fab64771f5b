"""Likelihood-ratio scoring of candidate records and threshold selection.

Each record is scored with exactly two forward passes over one shared
tokenization: log-likelihood with the domain prefix and without it. The
score is their difference (log domain end to end); a record is selected
when the log-ratio strictly exceeds ln(tau). Scoring is embarrassingly
parallel per record; the stream stage restores input order so output files
are byte-identical for any worker count.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

from . import tiny_lm
from .corpus import (
    CorpusFormatError,
    CorpusRecord,
    encode,
    read_corpus,
    write_scores,
)
from .prefix import DomainPrefix
from .tiny_lm import LmParams, log_likelihood, tokens_scored

SEQUENCE_SUM = "sequence_sum"
PER_TOKEN_MEAN = "per_token_mean"

_CHUNK = 32


def _fmt(value: float) -> str:
    # 17 significant digits round-trips any float64 exactly.
    return format(value, ".17g")


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    log_p_cond: float
    log_p_base: float
    log_ratio: float
    tokens_scored: int
    truncated: bool
    selected: bool

    def json_line(self) -> str:
        parts = [
            f'"id":{json.dumps(self.id, ensure_ascii=False)}',
            f'"log_p_base":{_fmt(self.log_p_base)}',
            f'"log_p_cond":{_fmt(self.log_p_cond)}',
            f'"log_ratio":{_fmt(self.log_ratio)}',
            f'"tokens_scored":{self.tokens_scored}',
            f'"selected":{json.dumps(self.selected)}',
            f'"truncated":{json.dumps(self.truncated)}',
        ]
        return "{" + ",".join(parts) + "}"


@dataclass(frozen=True)
class SelectionConfig:
    tau: float = 1.0
    normalization: str = SEQUENCE_SUM
    include_truncated: bool = True
    workers: int = 1

    def validate(self) -> None:
        problems = []
        if not (self.tau > 0):
            problems.append("tau must be > 0")
        if self.normalization not in (SEQUENCE_SUM, PER_TOKEN_MEAN):
            problems.append(f"unknown normalization {self.normalization!r}")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def log_tau(self) -> float:
        return math.log(self.tau)


def score_record(
    params: LmParams,
    prefix: DomainPrefix,
    record: CorpusRecord,
    cfg: SelectionConfig,
    allowed_bytes: Sequence[int] | None = None,
) -> ScoreRecord:
    """Score one record: conditional and base log-likelihood over the same
    tokenization, their difference, and the threshold decision."""
    cfg.validate()
    seq = encode(record.text, params.config.context_len)
    n = tokens_scored(seq)
    log_p_cond = log_likelihood(params, prefix, seq, allowed_bytes)
    log_p_base = log_likelihood(params, None, seq, allowed_bytes)
    if cfg.normalization == PER_TOKEN_MEAN:
        log_p_cond = log_p_cond / n
        log_p_base = log_p_base / n
    log_ratio = log_p_cond - log_p_base
    return ScoreRecord(
        id=record.id,
        log_p_cond=log_p_cond,
        log_p_base=log_p_base,
        log_ratio=log_ratio,
        tokens_scored=n,
        truncated=seq.truncated,
        selected=log_ratio > cfg.log_tau,
    )


@dataclass(frozen=True)
class ScoreSummary:
    count: int
    selected: int
    mean_log_ratio: float | None
    forward_passes: int


# Worker-process state for parallel scoring (populated by the initializer).
_worker_state: dict = {}


def _init_worker(params: LmParams, prefix: DomainPrefix, cfg: SelectionConfig) -> None:
    _worker_state["params"] = params
    _worker_state["prefix"] = prefix
    _worker_state["cfg"] = cfg


def _score_chunk_worker(chunk: list[CorpusRecord]) -> tuple[list[ScoreRecord], int]:
    before = tiny_lm.forward_pass_count()
    out = [
        score_record(_worker_state["params"], _worker_state["prefix"], record, _worker_state["cfg"])
        for record in chunk
    ]
    return out, tiny_lm.forward_pass_count() - before


def _chunks(records: Iterator[CorpusRecord], size: int) -> Iterator[list[CorpusRecord]]:
    chunk: list[CorpusRecord] = []
    for record in records:
        chunk.append(record)
        if len(chunk) >= size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def score_stream(
    params: LmParams,
    prefix: DomainPrefix,
    corpus_path: str | Path,
    out_path: str | Path,
    cfg: SelectionConfig,
    provenance: dict | None = None,
) -> ScoreSummary:
    """Score every record of a corpus file into a score file, preserving
    input order. Output bytes are identical for any ``cfg.workers``."""
    cfg.validate()
    records = read_corpus(corpus_path)

    def scored_chunks() -> Iterator[tuple[list[ScoreRecord], int]]:
        if cfg.workers <= 1:
            for chunk in _chunks(records, _CHUNK):
                before = tiny_lm.forward_pass_count()
                out = [score_record(params, prefix, r, cfg) for r in chunk]
                yield out, tiny_lm.forward_pass_count() - before
        else:
            with ProcessPoolExecutor(
                max_workers=cfg.workers,
                initializer=_init_worker,
                initargs=(params, prefix, cfg),
            ) as executor:
                yield from executor.map(_score_chunk_worker, _chunks(records, _CHUNK))

    count = 0
    n_selected = 0
    ratio_total = 0.0
    forwards = 0

    def emit() -> Iterator[ScoreRecord]:
        nonlocal count, n_selected, ratio_total, forwards
        for chunk, n_fwd in scored_chunks():
            forwards += n_fwd
            for sr in chunk:
                count += 1
                n_selected += sr.selected
                ratio_total += sr.log_ratio
                yield sr

    write_scores(out_path, emit(), provenance=provenance)
    mean = ratio_total / count if count else None
    return ScoreSummary(count=count, selected=n_selected, mean_log_ratio=mean, forward_passes=forwards)


_SCORE_FIELDS = {
    "id": str,
    "log_p_base": float,
    "log_p_cond": float,
    "log_ratio": float,
    "tokens_scored": int,
    "selected": bool,
    "truncated": bool,
}


def read_scores(path: str | Path) -> Iterator[ScoreRecord]:
    """Stream score records back from a score file (provenance line skipped)."""
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError(path, line_no, "expected a JSON object")
            if "_provenance" in obj:
                continue
            values = {}
            for name, kind in _SCORE_FIELDS.items():
                if name not in obj:
                    raise CorpusFormatError(path, line_no, f"missing field {name!r}")
                value = obj[name]
                if kind is float and isinstance(value, int):
                    value = float(value)
                if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
                    raise CorpusFormatError(path, line_no, f"field {name!r} has wrong type")
                values[name] = value
            yield ScoreRecord(**values)


def select(scores_path: str | Path, cfg: SelectionConfig) -> tuple[list[str], float]:
    """Ids whose log-ratio strictly exceeds ln(tau), in file order, plus the
    retention ratio. Truncated records are dropped when configured."""
    cfg.validate()
    selected: list[str] = []
    total = 0
    for sr in read_scores(scores_path):
        total += 1
        if sr.truncated and not cfg.include_truncated:
            continue
        if sr.log_ratio > cfg.log_tau:
            selected.append(sr.id)
    retention = len(selected) / total if total else 0.0
    return selected, retention
