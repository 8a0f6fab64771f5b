"""Reference selection methods for head-to-head comparison: perplexity
filtering, hashed n-gram importance weights, random sampling, and the
deterministic top-k used to budget-match every method.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import CorpusRecord, encode
from .tiny_lm import LmParams, log_likelihood, tokens_scored

# 64-bit FNV-1a constants.
FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def ppl_score(params: LmParams, record: CorpusRecord) -> float:
    """Perplexity of the record under the base model (no prefix); lower is
    preferred by the perplexity-filtering baseline."""
    seq = encode(record.text, params.config.context_len)
    n = tokens_scored(seq)
    return math.exp(-log_likelihood(params, None, seq) / n)


@dataclass
class NgramProfile:
    """Hashed byte n-gram histogram with add-alpha smoothing at query time."""

    n: int
    buckets: int
    counts: np.ndarray
    total: float
    smoothing_alpha: float

    def log_prob(self, bucket: int) -> float:
        return math.log(self.counts[bucket] + self.smoothing_alpha) - math.log(
            self.total + self.smoothing_alpha * self.buckets
        )


def _record_buckets(text: bytes, n: int, buckets: int) -> list[int]:
    return [fnv1a64(text[i : i + n]) % buckets for i in range(len(text) - n + 1)]


def build_profile(
    corpus: Iterable[CorpusRecord],
    n: int = 2,
    buckets: int = 4096,
    alpha: float = 1.0,
) -> NgramProfile:
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    counts = np.zeros(buckets)
    for record in corpus:
        for bucket in _record_buckets(record.text, n, buckets):
            counts[bucket] += 1.0
    return NgramProfile(n=n, buckets=buckets, counts=counts,
                        total=float(counts.sum()), smoothing_alpha=alpha)


def dsir_score(ref: NgramProfile, cand: NgramProfile, record: CorpusRecord) -> float:
    """Importance log-weight: sum over the record's hashed n-grams of
    log p_ref(bucket) - log p_cand(bucket). Higher is more reference-like."""
    if (ref.n, ref.buckets, ref.smoothing_alpha) != (cand.n, cand.buckets, cand.smoothing_alpha):
        raise ValueError(
            "profile parameters differ: "
            f"ref (n={ref.n}, buckets={ref.buckets}, alpha={ref.smoothing_alpha}) vs "
            f"cand (n={cand.n}, buckets={cand.buckets}, alpha={cand.smoothing_alpha})"
        )
    weight = 0.0
    for bucket in _record_buckets(record.text, ref.n, ref.buckets):
        weight += ref.log_prob(bucket) - cand.log_prob(bucket)
    return weight


def random_select(ids: Sequence[str], k: int, seed: int) -> list[str]:
    """Uniform sample without replacement, returned in original order."""
    if k < 0 or k > len(ids):
        raise ValueError(f"k={k} out of range for {len(ids)} ids")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(ids), size=k, replace=False)
    return [ids[i] for i in sorted(picked)]


def select_topk_by(
    scores: Sequence[tuple[str, float]], k: int, direction: str = "desc"
) -> list[str]:
    """Deterministic top-k by value; ties broken by id lexicographically."""
    if direction not in ("asc", "desc"):
        raise ValueError(f"direction must be 'asc' or 'desc', got {direction!r}")
    if k < 0 or k > len(scores):
        raise ValueError(f"k={k} out of range for {len(scores)} scores")
    if direction == "asc":
        ranked = sorted(scores, key=lambda pair: (pair[1], pair[0]))
    else:
        ranked = sorted(scores, key=lambda pair: (-pair[1], pair[0]))
    return [record_id for record_id, _ in ranked[:k]]


@dataclass(frozen=True)
class BaselineScore:
    """One baseline method's score line ({id, method, value, selected})."""

    id: str
    method: str
    value: float
    selected: bool

    def json_line(self) -> str:
        parts = [
            f'"id":{json.dumps(self.id, ensure_ascii=False)}',
            f'"method":{json.dumps(self.method)}',
            f'"value":{format(self.value, ".17g")}',
            f'"selected":{json.dumps(self.selected)}',
        ]
        return "{" + ",".join(parts) + "}"
