"""Synthetic multi-domain corpora, classification metrics, downstream
train-and-measure evaluation, and the ablation sweeps.

Four byte-level domains with ground-truth labels stand in for real target
domains: integer arithmetic equations, flat JSON-ish objects, order-2
English-character Markov text, and uniform printable noise. Labels make
precision/recall computable, which real corpora cannot offer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import select_topk_by
from .corpus import CorpusRecord
from .prefix import DomainPrefix, TuneHyper, init_prefix, tune_prefix
from .scoring import PER_TOKEN_MEAN, ScoreRecord, SelectionConfig, score_record
from .tiny_lm import (
    LmConfig,
    LmParams,
    TrainHyper,
    init_params,
    mean_nll,
    train_lm,
)

DOMAIN_KINDS = ("arith", "jsonish", "markov_en", "noise")

# Source text for the order-2 character chain; plain English, ASCII only.
_SEED_PARAGRAPH = (
    "the small press by the harbor printed tide tables and ferry notices "
    "for the fishing crews. every morning the typesetter walked down the "
    "hill with a thermos of black coffee and checked the wind before "
    "touching the machines. when the fog lifted early the gulls argued "
    "over the pier and the first boats came back heavy with silver fish. "
    "a careful reader could tell the season from the ink alone because "
    "the presses ran warmer in summer and the letters spread a little "
    "wider on the page. nobody hurried here and the work was done well."
)


def _build_markov_table(text: str) -> dict[str, str]:
    # Cyclic wrap guarantees every observed bigram has a continuation.
    looped = text + text[:2]
    table: dict[str, list[str]] = {}
    for i in range(len(text)):
        table.setdefault(looped[i : i + 2], []).append(looped[i + 2])
    return {state: "".join(sorted(nexts)) for state, nexts in table.items()}


_MARKOV_TABLE = _build_markov_table(_SEED_PARAGRAPH)
_MARKOV_STATES = sorted(_MARKOV_TABLE)


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    n_records: int
    length_range: tuple[int, int]
    seed: int

    def validate(self) -> None:
        problems = []
        if self.kind not in DOMAIN_KINDS:
            problems.append(f"unknown kind {self.kind!r}")
        if self.n_records < 0:
            problems.append("n_records must be >= 0")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            problems.append(f"bad length_range {self.length_range}")
        if self.kind == "arith" and (lo < 12 or hi - lo < 6):
            problems.append("arith needs length min >= 12 and max - min >= 6")
        if self.kind == "jsonish" and lo < 16:
            problems.append("jsonish needs length min >= 16")
        if self.kind == "markov_en" and lo < 4:
            problems.append("markov_en needs length min >= 4")
        if problems:
            raise ValueError("; ".join(problems))


def _arith_equation(rng: np.random.Generator, small: bool = False) -> str:
    if small:
        a = int(rng.integers(1, 10))
        b = int(rng.integers(1, 10))
        return f"{a}+{b}={a + b}"
    op = int(rng.integers(0, 3))
    if op == 0:
        a = int(rng.integers(0, 100))
        b = int(rng.integers(0, 100))
        return f"{a}+{b}={a + b}"
    if op == 1:
        a = int(rng.integers(0, 100))
        b = int(rng.integers(0, 100))
        if b > a:
            a, b = b, a
        return f"{a}-{b}={a - b}"
    a = int(rng.integers(0, 13))
    b = int(rng.integers(0, 13))
    return f"{a}*{b}={a * b}"


def _gen_arith(rng: np.random.Generator, lo: int, hi: int) -> str:
    text = _arith_equation(rng)
    while len(text) < lo:
        equation = _arith_equation(rng)
        if len(text) + 1 + len(equation) > hi:
            equation = _arith_equation(rng, small=True)
        text = f"{text};{equation}"
    return text


_JSONISH_KEYS = ("name", "size", "kind", "rank", "code", "flag", "note", "temp")
_JSONISH_WORDS = ("red", "blue", "gray", "oak", "iron", "mint", "nova", "flux")
_PAD_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _render_jsonish(pairs: list[tuple[str, object]]) -> str:
    body = ",".join(f'"{k}":{json.dumps(v)}' for k, v in pairs)
    return "{" + body + "}"


def _gen_jsonish(rng: np.random.Generator, lo: int, hi: int) -> str:
    target = int(rng.integers(lo, hi + 1))
    pairs: list[tuple[str, object]] = []
    used = 0
    while True:
        with_pad = _render_jsonish(pairs + [("p", "")])
        if len(with_pad) >= target:
            break
        key = _JSONISH_KEYS[used % len(_JSONISH_KEYS)] if used < len(_JSONISH_KEYS) else f"k{used}"
        if rng.integers(0, 2) == 0:
            value: object = int(rng.integers(0, 1000))
        else:
            value = _JSONISH_WORDS[int(rng.integers(0, len(_JSONISH_WORDS)))]
        candidate = pairs + [(key, value), ("p", "")]
        if len(_render_jsonish(candidate)) > target:
            break
        pairs.append((key, value))
        used += 1
    pad_len = target - len(_render_jsonish(pairs + [("p", "")]))
    pad = "".join(_PAD_LETTERS[int(rng.integers(0, 26))] for _ in range(pad_len))
    return _render_jsonish(pairs + [("p", pad)])


def _gen_markov(rng: np.random.Generator, lo: int, hi: int) -> str:
    target = int(rng.integers(lo, hi + 1))
    state = _MARKOV_STATES[int(rng.integers(0, len(_MARKOV_STATES)))]
    out = list(state)
    while len(out) < target:
        choices = _MARKOV_TABLE[state]
        nxt = choices[int(rng.integers(0, len(choices)))]
        out.append(nxt)
        state = out[-2] + out[-1]
    return "".join(out)


def _gen_noise(rng: np.random.Generator, lo: int, hi: int) -> str:
    length = int(rng.integers(lo, hi + 1))
    return bytes(int(b) for b in rng.integers(0x20, 0x7F, size=length)).decode("ascii")


_GENERATORS = {
    "arith": _gen_arith,
    "jsonish": _gen_jsonish,
    "markov_en": _gen_markov,
    "noise": _gen_noise,
}


def gen_domain(spec: DomainSpec) -> list[CorpusRecord]:
    """Deterministic self-labeling corpus for one synthetic domain."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.length_range
    generator = _GENERATORS[spec.kind]
    records = []
    for i in range(spec.n_records):
        text = generator(rng, lo, hi)
        records.append(
            CorpusRecord(
                id=f"{spec.kind}-{spec.seed}-{i:04d}",
                text=text.encode("utf-8"),
                label=spec.kind,
            )
        )
    return records


def mix_pool(specs: Sequence[DomainSpec], shuffle_seed: int) -> list[CorpusRecord]:
    """Concatenate the domains and shuffle deterministically; labels kept."""
    if len(specs) < 2:
        raise ValueError("mix_pool needs at least 2 domain specs")
    records: list[CorpusRecord] = []
    for spec in specs:
        records.extend(gen_domain(spec))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids across domain specs")
    rng = np.random.default_rng(shuffle_seed)
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1 with ties assigned their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_auc(scores: Sequence[float], positive: Sequence[bool]) -> float:
    """AUC via the rank-sum statistic with mid-rank tie handling."""
    values = np.asarray(scores, dtype=float)
    pos = np.asarray(positive, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = _midranks(values)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class ClassificationMetrics:
    auc: float
    precision_at_k: dict[int, float]
    f1_at_tau: float
    retention: float


def classification_metrics(
    scores: Sequence[tuple[str, float]],
    labels: dict[str, str],
    tau: float,
    ks: Sequence[int] = (),
) -> ClassificationMetrics:
    """AUC, precision@k under the deterministic top-k rule, and F1 of the
    tau-thresholded selection. ``labels`` maps every scored id to
    ``"in"``/``"out"``; scores are log-ratios, thresholded at ln(tau)."""
    for record_id, _ in scores:
        if record_id not in labels:
            raise ValueError(f"unlabeled id {record_id!r}")
        if labels[record_id] not in ("in", "out"):
            raise ValueError(f"label for {record_id!r} must be 'in' or 'out'")
    values = [value for _, value in scores]
    positive = [labels[record_id] == "in" for record_id, _ in scores]
    auc = rank_auc(values, positive)

    precision_at_k: dict[int, float] = {}
    for k in ks:
        top = select_topk_by(scores, k, direction="desc")
        precision_at_k[k] = (
            sum(labels[record_id] == "in" for record_id in top) / k if k else 0.0
        )

    log_tau = math.log(tau)
    selected = [record_id for record_id, value in scores if value > log_tau]
    n_pos = sum(positive)
    true_pos = sum(labels[record_id] == "in" for record_id in selected)
    precision = true_pos / len(selected) if selected else 0.0
    recall = true_pos / n_pos if n_pos else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    retention = len(selected) / len(scores) if scores else 0.0
    return ClassificationMetrics(
        auc=auc, precision_at_k=precision_at_k, f1_at_tau=f1, retention=retention
    )


@dataclass
class EvalReport:
    auc: float
    precision_at_k: dict[int, float]
    f1_at_tau: float
    retention: float
    downstream_ppl: float | None = None
    seeds: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "auc": self.auc,
            "precision_at_k": {str(k): v for k, v in self.precision_at_k.items()},
            "f1_at_tau": self.f1_at_tau,
            "retention": self.retention,
            "downstream_ppl": self.downstream_ppl,
            "seeds": self.seeds,
            "configs": self.configs,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EvalReport":
        return cls(
            auc=obj["auc"],
            precision_at_k={int(k): v for k, v in obj["precision_at_k"].items()},
            f1_at_tau=obj["f1_at_tau"],
            retention=obj["retention"],
            downstream_ppl=obj["downstream_ppl"],
            seeds=obj.get("seeds", {}),
            configs=obj.get("configs", {}),
        )

    def save(self, path: str | Path, provenance: dict | None = None) -> None:
        doc = self.to_json_dict()
        if provenance is not None:
            doc["_provenance"] = provenance
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(doc, handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_json_dict(json.load(handle))


@dataclass(frozen=True)
class DownstreamResult:
    nll: float
    ppl: float


def downstream_eval(
    base: LmParams,
    selected: Sequence[CorpusRecord],
    ref_heldout: Sequence[CorpusRecord],
    hyper: TrainHyper,
) -> DownstreamResult:
    """Fine-tune a copy of ``base`` on the selected records and measure mean
    per-token NLL (and perplexity) on the held-out reference, no prefix."""
    selected = list(selected)
    heldout = list(ref_heldout)
    if not selected:
        raise ValueError("selected corpus is empty")
    if not heldout:
        raise ValueError("held-out reference is empty")
    tuned, _ = train_lm(base, selected, hyper)
    nll, _ = mean_nll(tuned, heldout)
    return DownstreamResult(nll=nll, ppl=math.exp(nll))


def score_pool(
    params: LmParams,
    prefix: DomainPrefix,
    pool: Sequence[CorpusRecord],
    cfg: SelectionConfig,
) -> list[ScoreRecord]:
    """In-memory scoring of a record list (one shared pass for sweeps)."""
    return [score_record(params, prefix, record, cfg) for record in pool]


@dataclass(frozen=True)
class ThresholdRow:
    tau: float
    retention: float
    f1: float
    downstream_ppl: float | None


def ablate_threshold(
    pool: Sequence[CorpusRecord],
    params: LmParams,
    prefix: DomainPrefix,
    taus: Sequence[float],
    *,
    in_label: str,
    cfg: SelectionConfig | None = None,
    base: LmParams | None = None,
    ref_heldout: Sequence[CorpusRecord] | None = None,
    train_hyper: TrainHyper | None = None,
    scores: Sequence[ScoreRecord] | None = None,
) -> list[ThresholdRow]:
    """Threshold sweep over one shared scoring pass. Downstream perplexity
    is filled in only when a base model, held-out set, and fine-tuning
    hyperparameters are all provided (and the selection is non-empty)."""
    if not taus:
        raise ValueError("taus must be non-empty")
    cfg = cfg or SelectionConfig(normalization=PER_TOKEN_MEAN)
    if scores is None:
        scores = score_pool(params, prefix, pool, cfg)
    by_id = {record.id: record for record in pool}
    labels = {sr.id: "in" if by_id[sr.id].label == in_label else "out" for sr in scores}
    rows = []
    for tau in taus:
        log_tau = math.log(tau)
        picked = [
            sr for sr in scores
            if sr.log_ratio > log_tau and (cfg.include_truncated or not sr.truncated)
        ]
        metrics = classification_metrics(
            [(sr.id, sr.log_ratio) for sr in scores], labels, tau
        )
        downstream_ppl = None
        if base is not None and ref_heldout is not None and train_hyper is not None and picked:
            result = downstream_eval(
                base, [by_id[sr.id] for sr in picked], ref_heldout, train_hyper
            )
            downstream_ppl = result.ppl
        rows.append(
            ThresholdRow(
                tau=tau,
                retention=len(picked) / len(scores),
                f1=metrics.f1_at_tau,
                downstream_ppl=downstream_ppl,
            )
        )
    return rows


@dataclass(frozen=True)
class PrefixLengthRow:
    m: int
    heldout_log_likelihood: float
    n_prefix_params: int


def ablate_prefix_length(
    ref_train: Sequence[CorpusRecord],
    ref_heldout: Sequence[CorpusRecord],
    params: LmParams,
    ms: Sequence[int],
    hyper: TuneHyper,
    init_seed: int = 0,
) -> list[PrefixLengthRow]:
    """Tune one prefix per length from the same seed and report mean
    per-token held-out reference log-likelihood. m=0 is the no-prefix
    baseline by construction."""
    if not ms:
        raise ValueError("ms must be non-empty")
    rows = []
    for m in ms:
        fresh = init_prefix(params.config, m, init_seed)
        tuned, _ = tune_prefix(params, fresh, ref_train, hyper)
        nll, _ = mean_nll(params, ref_heldout, tuned)
        rows.append(
            PrefixLengthRow(
                m=m, heldout_log_likelihood=-nll, n_prefix_params=tuned.n_parameters()
            )
        )
    return rows


@dataclass(frozen=True)
class ModelSizeRow:
    config_hash: str
    d_model: int
    n_layers: int
    auc: float
    downstream_ppl: float | None


def ablate_model_size(
    configs: Sequence[LmConfig],
    pretrain: Sequence[CorpusRecord],
    ref_train: Sequence[CorpusRecord],
    ref_heldout: Sequence[CorpusRecord],
    pool: Sequence[CorpusRecord],
    *,
    in_label: str,
    train_hyper: TrainHyper,
    tune_hyper: TuneHyper,
    prefix_len: int = 30,
    prefix_seed: int = 0,
    cfg: SelectionConfig | None = None,
    downstream_hyper: TrainHyper | None = None,
) -> list[ModelSizeRow]:
    """Run the whole pipeline per model size with shared seeds and data."""
    if len(configs) < 2:
        raise ValueError("model-size ablation needs at least 2 configs")
    cfg = cfg or SelectionConfig(normalization=PER_TOKEN_MEAN)
    by_id = {record.id: record for record in pool}
    rows = []
    for config in configs:
        base, _ = train_lm(init_params(config), pretrain, train_hyper)
        base.freeze()
        fresh = init_prefix(config, prefix_len, prefix_seed)
        tuned, _ = tune_prefix(base, fresh, ref_train, tune_hyper)
        scores = score_pool(base, tuned, pool, cfg)
        labels = {
            sr.id: "in" if by_id[sr.id].label == in_label else "out" for sr in scores
        }
        metrics = classification_metrics(
            [(sr.id, sr.log_ratio) for sr in scores], labels, cfg.tau
        )
        downstream_ppl = None
        if downstream_hyper is not None:
            picked = [by_id[sr.id] for sr in scores if sr.selected]
            if picked:
                downstream_ppl = downstream_eval(
                    base, picked, ref_heldout, downstream_hyper
                ).ppl
        rows.append(
            ModelSizeRow(
                config_hash=config.hash(),
                d_model=config.d_model,
                n_layers=config.n_layers,
                auc=metrics.auc,
                downstream_ppl=downstream_ppl,
            )
        )
    return rows
