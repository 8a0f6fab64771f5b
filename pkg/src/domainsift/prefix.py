"""Learning the domain prefix: per-layer key/value rows tuned by maximum
likelihood on a reference corpus while the base model stays frozen.

The prefix is the only trainable object here; tuning applies the decoupled
weight-decay adaptive-moment update with global gradient-norm clipping.
An embedding-level soft prompt is deliberately not the default: key/value
prefixes condition every layer's attention, which is the more flexible
insertion point.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .corpus import CorpusRecord, TokenSequence, encode
from .tiny_lm import (
    AdamW,
    ConfigError,
    LmConfig,
    LmParams,
    clip_grads_,
    log_likelihood,
    loss_and_grads,
    params_hash,
    scaled_normal,
)

DEFAULT_PREFIX_LEN = 30


class DivergenceError(RuntimeError):
    """Tuning produced a non-finite loss; carries the offending epoch."""

    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


@dataclass
class DomainPrefix:
    """Learned per-layer key/value blocks of length ``m``. ``m == 0`` is a
    valid no-op prefix. ``config_hash`` pins the model configuration the
    blocks were shaped (and tuned) against."""

    m: int
    k_blocks: list[np.ndarray]
    v_blocks: list[np.ndarray]
    config_hash: str
    provenance: dict = field(default_factory=dict)

    def named_tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        for i, block in enumerate(self.k_blocks):
            yield f"prefix.k.{i}", block
        for i, block in enumerate(self.v_blocks):
            yield f"prefix.v.{i}", block

    def tensor_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_tensors())

    def copy(self) -> "DomainPrefix":
        return DomainPrefix(
            m=self.m,
            k_blocks=[b.copy() for b in self.k_blocks],
            v_blocks=[b.copy() for b in self.v_blocks],
            config_hash=self.config_hash,
            provenance=dict(self.provenance),
        )

    def freeze(self) -> "DomainPrefix":
        for _, arr in self.named_tensors():
            arr.flags.writeable = False
        return self

    def n_parameters(self) -> int:
        return sum(arr.size for _, arr in self.named_tensors())


def prefix_hash(prefix: DomainPrefix) -> str:
    digest = hashlib.sha256()
    digest.update(prefix.config_hash.encode())
    for name, arr in prefix.named_tensors():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def corpus_hash(records: Sequence[CorpusRecord]) -> str:
    digest = hashlib.sha256()
    for record in records:
        digest.update(record.id.encode())
        digest.update(b"\x00")
        digest.update(record.text)
        digest.update(b"\x01")
    return digest.hexdigest()


@dataclass(frozen=True)
class TuneHyper:
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    epochs: int = 10
    batch_size: int = 4
    grad_clip_norm: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.learning_rate <= 0:
            problems.append("learning_rate must be > 0")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


def init_prefix(config: LmConfig, m: int, seed: int) -> DomainPrefix:
    """Fresh prefix with K/V blocks from the shared scaled zero-mean
    initializer; deterministic from ``seed``."""
    config.validate()
    if m < 0:
        raise ValueError(f"prefix length must be >= 0, got {m}")
    rng = np.random.default_rng(seed)
    d = config.d_model
    k_blocks = [scaled_normal(rng, (m, d), d) for _ in range(config.n_layers)]
    v_blocks = [scaled_normal(rng, (m, d), d) for _ in range(config.n_layers)]
    return DomainPrefix(m=m, k_blocks=k_blocks, v_blocks=v_blocks, config_hash=config.hash())


def mean_sequence_log_likelihood(
    params: LmParams, prefix: DomainPrefix | None, seqs: Sequence[TokenSequence]
) -> float:
    """Mean over records of the whole-sequence log-likelihood (the tuning
    objective reported per epoch)."""
    total = 0.0
    for seq in seqs:
        total += log_likelihood(params, prefix, seq)
    return total / len(seqs)


def tune_prefix(
    params: LmParams,
    prefix: DomainPrefix,
    ref_corpus: Sequence[CorpusRecord],
    hyper: TuneHyper,
) -> tuple[DomainPrefix, list[float]]:
    """Maximize reference likelihood over the prefix tensors only.

    The base model is read-only throughout (hash-identical before/after).
    Returns the tuned prefix and the per-epoch curve of mean per-record
    sequence log-likelihood, measured after each epoch's updates.
    """
    hyper.validate()
    records = list(ref_corpus)
    if not records:
        raise ValueError("reference corpus is empty")

    work = prefix.copy()
    seqs = [encode(r.text, params.config.context_len) for r in records]
    curve: list[float] = []
    if hyper.epochs > 0 and work.m > 0:
        rng = np.random.default_rng(hyper.seed)
        opt = AdamW(work.tensor_dict(), hyper.learning_rate, hyper.weight_decay)
        for epoch in range(hyper.epochs):
            order = rng.permutation(len(seqs))
            for start in range(0, len(order), hyper.batch_size):
                batch = [seqs[i] for i in order[start : start + hyper.batch_size]]
                loss, grads = loss_and_grads(params, work, batch, trainable=("prefix",))
                if not math.isfinite(loss):
                    raise DivergenceError(epoch)
                clip_grads_(grads, hyper.grad_clip_norm)
                opt.step(grads)
            curve.append(mean_sequence_log_likelihood(params, work, seqs))
    elif hyper.epochs > 0:
        # m == 0: nothing to train, but the curve is still well-defined.
        value = mean_sequence_log_likelihood(params, work, seqs)
        curve = [value] * hyper.epochs

    work.provenance = {
        "reference_corpus_hash": corpus_hash(records),
        "hyper": asdict(hyper),
        "base_params_hash": params_hash(params),
        "final_reference_log_likelihood": curve[-1] if curve else None,
    }
    return work, curve


def prefix_grad_check(
    params: LmParams,
    prefix: DomainPrefix,
    sample: TokenSequence,
    n_coords: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    _flip_sign: bool = False,
) -> float:
    """Max relative error between analytic prefix gradients and central
    finite differences over random prefix coordinates. ``_flip_sign`` is a
    test-only hook that corrupts the analytic side to prove the check can
    fail."""
    if prefix.m == 0:
        return 0.0
    work = prefix.copy()
    batch = [sample]
    _, grads = loss_and_grads(params, work, batch, trainable=("prefix",))

    def loss_value() -> float:
        return -log_likelihood(params, work, sample) / (len(sample.ids) - 1)

    rng = np.random.default_rng(seed)
    names = sorted(grads)
    worst = 0.0
    for _ in range(n_coords):
        name = names[rng.integers(0, len(names))]
        blocks = work.k_blocks if ".k." in name else work.v_blocks
        arr = blocks[int(name.rsplit(".", 1)[1])]
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        f_plus = loss_value()
        arr[idx] = orig - h
        f_minus = loss_value()
        arr[idx] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        analytic = grads[name][idx]
        if _flip_sign:
            analytic = -analytic
        worst = max(worst, abs(analytic - fd) / max(1.0, abs(fd)))
    return worst


def save_prefix(path, prefix: DomainPrefix, provenance: dict | None = None) -> None:
    meta = {
        "m": prefix.m,
        "config_hash": prefix.config_hash,
        "provenance": {**prefix.provenance, **(provenance or {})},
    }
    ckpt.write_checkpoint(path, ckpt.KIND_DOMAIN_PREFIX, meta, list(prefix.named_tensors()))


def load_prefix(path) -> DomainPrefix:
    header, tensors = ckpt.read_checkpoint(path)
    if header.get("kind") != ckpt.KIND_DOMAIN_PREFIX:
        raise ckpt.CheckpointError(
            f"{path}: not a prefix checkpoint (kind={header.get('kind')!r})"
        )
    n_layers = sum(1 for name in tensors if name.startswith("prefix.k."))
    try:
        k_blocks = [tensors[f"prefix.k.{i}"] for i in range(n_layers)]
        v_blocks = [tensors[f"prefix.v.{i}"] for i in range(n_layers)]
    except KeyError as exc:
        raise ckpt.CheckpointError(f"{path}: missing tensor {exc}") from exc
    prefix = DomainPrefix(
        m=header["m"],
        k_blocks=k_blocks,
        v_blocks=v_blocks,
        config_hash=header["config_hash"],
        provenance=header.get("provenance", {}),
    )
    return prefix.freeze()
