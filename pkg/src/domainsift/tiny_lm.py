"""A small decoder-only autoregressive language model in pure numpy.

Pre-norm transformer blocks, learned positional embeddings, untied output
projection, byte-level vocabulary. Forward, log-likelihood, and exact
analytic gradients are all hand-written in float64 so that results are
bit-reproducible and checkable against finite differences. Each attention
layer can additionally attend to a block of learned key/value rows (the
domain prefix); those rows receive no positional embedding and emit no
predictions.

Likelihood accumulation is double precision in fixed left-to-right order,
which is what makes score files byte-identical across worker counts.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, VOCAB_SIZE, CorpusRecord, TokenSequence, encode

if TYPE_CHECKING:
    from .prefix import DomainPrefix

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

# Cumulative number of forward passes in this process; scoring is contracted
# to exactly two per record, which tests verify through deltas of this value.
_FORWARD_PASSES = 0


def forward_pass_count() -> int:
    return _FORWARD_PASSES


class ConfigError(ValueError):
    """Invalid model configuration; message lists every violation."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent (e.g. prefix vs model dimensions)."""


@dataclass(frozen=True)
class LmConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    context_len: int = 128
    vocab_size: int = VOCAB_SIZE
    seed: int = 0

    def validate(self) -> None:
        problems = []
        for name in ("d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.context_len < 2:
            problems.append("context_len must be >= 2")
        if self.vocab_size < 2:
            problems.append("vocab_size must be >= 2")
        if self.d_model % self.n_heads != 0:
            problems.append(
                f"d_model ({self.d_model}) not divisible by n_heads ({self.n_heads})"
            )
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def tiny_config(seed: int = 0) -> LmConfig:
    """Default small model (one of the two model-size ablation points)."""
    return LmConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, context_len=128, seed=seed)


def small_config(seed: int = 0) -> LmConfig:
    """The larger model-size ablation point."""
    return LmConfig(d_model=64, n_layers=4, n_heads=8, d_ff=128, context_len=128, seed=seed)


@dataclass
class LayerParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray


_LAYER_TENSORS = (
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo",
    "ln2_g", "ln2_b", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
)


@dataclass
class LmParams:
    """All model weights. The positional table has ``context_len + 1`` rows
    because a full-length sequence presents BOS plus ``context_len`` byte
    inputs."""

    config: LmConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    layers: list[LayerParams]
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_out: np.ndarray
    frozen: bool = field(default=False, compare=False)

    def named_tensors(self) -> Iterable[tuple[str, np.ndarray]]:
        """Tensors in canonical (checkpoint manifest) order."""
        yield "tok_emb", self.tok_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name in _LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "lnf_g", self.lnf_g
        yield "lnf_b", self.lnf_b
        yield "w_out", self.w_out

    def tensor_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named_tensors())

    def copy(self) -> "LmParams":
        """Writable deep copy (bit-identical values)."""
        out = LmParams(
            config=self.config,
            tok_emb=self.tok_emb.copy(),
            pos_emb=self.pos_emb.copy(),
            layers=[
                LayerParams(**{n: getattr(l, n).copy() for n in _LAYER_TENSORS})
                for l in self.layers
            ],
            lnf_g=self.lnf_g.copy(),
            lnf_b=self.lnf_b.copy(),
            w_out=self.w_out.copy(),
        )
        return out

    def freeze(self) -> "LmParams":
        """Mark immutable; any in-place write afterwards raises."""
        for _, arr in self.named_tensors():
            arr.flags.writeable = False
        self.frozen = True
        return self

    def n_parameters(self) -> int:
        return sum(arr.size for _, arr in self.named_tensors())


def params_hash(params: LmParams) -> str:
    """Content hash over config plus raw tensor bytes in canonical order."""
    digest = hashlib.sha256()
    digest.update(json.dumps(params.config.to_dict(), sort_keys=True).encode())
    for name, arr in params.named_tensors():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def scaled_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Zero-mean normal scaled by 1/sqrt(fan_in); the shared initializer for
    weight matrices, embeddings, and prefix blocks."""
    return rng.normal(0.0, fan_in ** -0.5, size=shape)


def init_params(config: LmConfig) -> LmParams:
    """Deterministic initialization from ``config.seed``. Norm scales start
    at 1 and biases at 0; everything else is scaled zero-mean normal."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    d, d_ff, vocab = config.d_model, config.d_ff, config.vocab_size
    tok_emb = scaled_normal(rng, (vocab, d), d)
    pos_emb = scaled_normal(rng, (config.context_len + 1, d), d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerParams(
                ln1_g=np.ones(d), ln1_b=np.zeros(d),
                wq=scaled_normal(rng, (d, d), d),
                wk=scaled_normal(rng, (d, d), d),
                wv=scaled_normal(rng, (d, d), d),
                wo=scaled_normal(rng, (d, d), d),
                ln2_g=np.ones(d), ln2_b=np.zeros(d),
                w_ff1=scaled_normal(rng, (d, d_ff), d),
                b_ff1=np.zeros(d_ff),
                w_ff2=scaled_normal(rng, (d_ff, d), d_ff),
                b_ff2=np.zeros(d),
            )
        )
    return LmParams(
        config=config,
        tok_emb=tok_emb,
        pos_emb=pos_emb,
        layers=layers,
        lnf_g=np.ones(d),
        lnf_b=np.zeros(d),
        w_out=scaled_normal(rng, (d, vocab), d),
    )


def zero_params(config: LmConfig) -> LmParams:
    """All-zero weights (uniform next-token distribution); test utility."""
    config.validate()
    d, d_ff, vocab = config.d_model, config.d_ff, config.vocab_size
    layers = [
        LayerParams(
            ln1_g=np.zeros(d), ln1_b=np.zeros(d),
            wq=np.zeros((d, d)), wk=np.zeros((d, d)),
            wv=np.zeros((d, d)), wo=np.zeros((d, d)),
            ln2_g=np.zeros(d), ln2_b=np.zeros(d),
            w_ff1=np.zeros((d, d_ff)), b_ff1=np.zeros(d_ff),
            w_ff2=np.zeros((d_ff, d)), b_ff2=np.zeros(d),
        )
        for _ in range(config.n_layers)
    ]
    return LmParams(
        config=config,
        tok_emb=np.zeros((vocab, d)),
        pos_emb=np.zeros((config.context_len + 1, d)),
        layers=layers,
        lnf_g=np.zeros(d),
        lnf_b=np.zeros(d),
        w_out=np.zeros((d, vocab)),
    )


def _prefix_blocks(
    params: LmParams, prefix: "DomainPrefix | None"
) -> tuple[int, list[np.ndarray], list[np.ndarray]]:
    """Validate and unpack the prefix key/value blocks (empty when absent)."""
    cfg = params.config
    if prefix is None:
        empty = [np.zeros((0, cfg.d_model)) for _ in range(cfg.n_layers)]
        return 0, empty, list(empty)
    if len(prefix.k_blocks) != cfg.n_layers or len(prefix.v_blocks) != cfg.n_layers:
        raise ShapeError(
            f"prefix has {len(prefix.k_blocks)} layers, model has {cfg.n_layers}"
        )
    for blocks in (prefix.k_blocks, prefix.v_blocks):
        for i, block in enumerate(blocks):
            if block.shape != (prefix.m, cfg.d_model):
                raise ShapeError(
                    f"prefix block {i} has shape {block.shape}, "
                    f"expected {(prefix.m, cfg.d_model)}"
                )
    return prefix.m, list(prefix.k_blocks), list(prefix.v_blocks)


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_bwd(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_fwd(x):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(x, t):
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


class _Cache:
    """Intermediate activations of one forward pass, kept for backprop."""

    __slots__ = ("x_idx", "m", "layers", "lnf", "hf", "h_in")

    def __init__(self):
        self.layers = []


def _forward(params: LmParams, prefix: "DomainPrefix | None", x_idx: np.ndarray):
    """Causal forward over ``x_idx`` (input token ids). Returns the logits
    grid [len(x_idx), vocab] and the activation cache."""
    global _FORWARD_PASSES
    _FORWARD_PASSES += 1

    cfg = params.config
    T = len(x_idx)
    if T > cfg.context_len + 1:
        raise ShapeError(
            f"input length {T} exceeds context {cfg.context_len} (+1 for BOS)"
        )
    m, pk_blocks, pv_blocks = _prefix_blocks(params, prefix)
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)

    cache = _Cache()
    cache.x_idx = x_idx
    cache.m = m

    h = params.tok_emb[x_idx] + params.pos_emb[:T]
    cache.h_in = h
    # Row t may attend to every prefix column and to text columns <= t.
    mask = np.concatenate(
        [np.ones((T, m), dtype=bool), np.tril(np.ones((T, T), dtype=bool))], axis=1
    )

    for li, layer in enumerate(params.layers):
        a, ln1_cache = _layernorm_fwd(h, layer.ln1_g, layer.ln1_b)
        q = a @ layer.wq
        kt = a @ layer.wk
        vt = a @ layer.wv
        K = np.concatenate([pk_blocks[li], kt], axis=0)
        V = np.concatenate([pv_blocks[li], vt], axis=0)
        S = m + T
        qh = q.reshape(T, H, dh)
        Kh = K.reshape(S, H, dh)
        Vh = V.reshape(S, H, dh)
        scores = np.einsum("thd,shd->hts", qh, Kh) * scale
        scores = np.where(mask[None, :, :], scores, -np.inf)
        rowmax = scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores - rowmax)
        probs = expd / expd.sum(axis=-1, keepdims=True)
        ctx2d = np.einsum("hts,shd->thd", probs, Vh).reshape(T, cfg.d_model)
        h = h + ctx2d @ layer.wo

        a2, ln2_cache = _layernorm_fwd(h, layer.ln2_g, layer.ln2_b)
        f1 = a2 @ layer.w_ff1 + layer.b_ff1
        u, gelu_t = _gelu_fwd(f1)
        h = h + (u @ layer.w_ff2 + layer.b_ff2)

        cache.layers.append(
            dict(a=a, ln1=ln1_cache, qh=qh, Kh=Kh, Vh=Vh, probs=probs,
                 ctx2d=ctx2d, a2=a2, ln2=ln2_cache, f1=f1, u=u, gelu_t=gelu_t)
        )

    hf, lnf_cache = _layernorm_fwd(h, params.lnf_g, params.lnf_b)
    cache.lnf = lnf_cache
    cache.hf = hf
    return hf @ params.w_out, cache


def _backward(
    params: LmParams,
    prefix: "DomainPrefix | None",
    cache: _Cache,
    dlogits: np.ndarray,
    grads: dict[str, np.ndarray],
    want_params: bool,
    want_prefix: bool,
) -> None:
    """Accumulate d(loss)/d(tensor) into ``grads`` given d(loss)/d(logits).

    Gradients with respect to activations are always propagated in full;
    the ``want_*`` flags only control which parameter tensors are stored.
    """
    cfg = params.config
    H, dh_dim = cfg.n_heads, cfg.d_head
    T = len(cache.x_idx)
    m = cache.m
    scale = 1.0 / math.sqrt(dh_dim)

    def add(name, value):
        if name in grads:
            grads[name] += value
        else:
            grads[name] = value

    if want_params:
        add("w_out", cache.hf.T @ dlogits)
    dhf = dlogits @ params.w_out.T
    dh, dgf, dbf = _layernorm_bwd(dhf, params.lnf_g, cache.lnf)
    if want_params:
        add("lnf_g", dgf)
        add("lnf_b", dbf)

    for li in range(cfg.n_layers - 1, -1, -1):
        layer = params.layers[li]
        lc = cache.layers[li]

        # Feed-forward block (residual branch plus pass-through).
        df2 = dh
        du = df2 @ layer.w_ff2.T
        df1 = du * _gelu_bwd(lc["f1"], lc["gelu_t"])
        da2 = df1 @ layer.w_ff1.T
        if want_params:
            add(f"layers.{li}.w_ff2", lc["u"].T @ df2)
            add(f"layers.{li}.b_ff2", df2.sum(axis=0))
            add(f"layers.{li}.w_ff1", lc["a2"].T @ df1)
            add(f"layers.{li}.b_ff1", df1.sum(axis=0))
        dh_branch, dg2, db2 = _layernorm_bwd(da2, layer.ln2_g, lc["ln2"])
        if want_params:
            add(f"layers.{li}.ln2_g", dg2)
            add(f"layers.{li}.ln2_b", db2)
        dh = dh + dh_branch

        # Attention block.
        dattn = dh
        dctx2d = dattn @ layer.wo.T
        if want_params:
            add(f"layers.{li}.wo", lc["ctx2d"].T @ dattn)
        dctx = dctx2d.reshape(T, H, dh_dim)
        probs = lc["probs"]
        dP = np.einsum("thd,shd->hts", dctx, lc["Vh"])
        dV = np.einsum("hts,thd->shd", probs, dctx).reshape(m + T, cfg.d_model)
        # Softmax backward; masked columns have probs == 0, hence dS == 0.
        dS = probs * (dP - (dP * probs).sum(axis=-1, keepdims=True))
        dS = dS * scale
        dq = np.einsum("hts,shd->thd", dS, lc["Kh"]).reshape(T, cfg.d_model)
        dK = np.einsum("hts,thd->shd", dS, lc["qh"]).reshape(m + T, cfg.d_model)
        if want_prefix and m > 0:
            add(f"prefix.k.{li}", dK[:m])
            add(f"prefix.v.{li}", dV[:m])
        dkt = dK[m:]
        dvt = dV[m:]
        a = lc["a"]
        if want_params:
            add(f"layers.{li}.wq", a.T @ dq)
            add(f"layers.{li}.wk", a.T @ dkt)
            add(f"layers.{li}.wv", a.T @ dvt)
        da = dq @ layer.wq.T + dkt @ layer.wk.T + dvt @ layer.wv.T
        dh_branch, dg1, db1 = _layernorm_bwd(da, layer.ln1_g, lc["ln1"])
        if want_params:
            add(f"layers.{li}.ln1_g", dg1)
            add(f"layers.{li}.ln1_b", db1)
        dh = dh + dh_branch

    if want_params:
        dtok = np.zeros_like(params.tok_emb)
        np.add.at(dtok, cache.x_idx, dh)
        add("tok_emb", dtok)
        dpos = np.zeros_like(params.pos_emb)
        dpos[:T] += dh
        add("pos_emb", dpos)


def forward_logits(
    params: LmParams, prefix: "DomainPrefix | None", seq: TokenSequence
) -> np.ndarray:
    """Next-token logits for every input position of ``seq``. Row ``t``
    parameterizes p(token at t+1 | prefix, tokens up to t)."""
    x_idx = np.asarray(seq.ids[:-1], dtype=np.intp)
    logits, _ = _forward(params, prefix, x_idx)
    return logits


def _restricted_columns(
    cfg: LmConfig, position: int, allowed_bytes: Sequence[int] | None
) -> np.ndarray | None:
    """Columns a masked model may predict at the given input position.

    With a byte mask active the support is the allowed bytes plus EOS, and
    the position right after ``context_len`` bytes is forced to EOS so the
    masked model is a proper distribution over bounded-length strings.
    """
    if allowed_bytes is None:
        return None
    if position >= cfg.context_len:
        return np.array([EOS_ID], dtype=np.intp)
    return np.array(sorted(allowed_bytes) + [EOS_ID], dtype=np.intp)


def _row_log_prob(
    logits_row: np.ndarray, target: int, columns: np.ndarray | None
) -> float:
    if columns is None:
        rowmax = logits_row.max()
        lse = rowmax + math.log(np.exp(logits_row - rowmax).sum())
        return float(logits_row[target] - lse)
    hits = np.nonzero(columns == target)[0]
    if hits.size == 0:
        raise ValueError(f"target token {target} outside the restricted vocabulary")
    vals = logits_row[columns]
    rowmax = vals.max()
    lse = rowmax + math.log(np.exp(vals - rowmax).sum())
    return float(vals[hits[0]] - lse)


def log_likelihood(
    params: LmParams,
    prefix: "DomainPrefix | None",
    seq: TokenSequence,
    allowed_bytes: Sequence[int] | None = None,
) -> float:
    """Sum of per-position log probabilities (nats) of ``seq`` under the
    model, optionally with the vocabulary restricted to ``allowed_bytes``
    plus EOS."""
    if len(seq.ids) < 2:
        return 0.0
    logits = forward_logits(params, prefix, seq)
    total = 0.0
    for t in range(logits.shape[0]):
        cols = _restricted_columns(params.config, t, allowed_bytes)
        total += _row_log_prob(logits[t], seq.ids[t + 1], cols)
    return total


def tokens_scored(seq: TokenSequence) -> int:
    """Number of predicted positions (text bytes plus EOS when present)."""
    return len(seq.ids) - 1


_TRAINABLE_CHOICES = frozenset({"params", "prefix"})


def loss_and_grads(
    params: LmParams,
    prefix: "DomainPrefix | None",
    batch: Sequence[TokenSequence],
    trainable: Iterable[str] = ("params",),
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-token negative log-likelihood of ``batch`` and its exact
    analytic gradients for the selected tensor groups.

    Gradient keys follow ``named_tensors`` naming for the model and
    ``prefix.k.<layer>`` / ``prefix.v.<layer>`` for the prefix. Unselected
    groups get no gradient storage at all.
    """
    selected = frozenset(trainable)
    unknown = selected - _TRAINABLE_CHOICES
    if unknown:
        raise ValueError(f"unknown trainable selector(s): {sorted(unknown)}")
    if not batch:
        raise ValueError("batch must be non-empty")
    if "prefix" in selected and prefix is None:
        raise ValueError("trainable includes 'prefix' but no prefix was given")

    total_tokens = sum(len(seq.ids) - 1 for seq in batch)
    if total_tokens == 0:
        raise ValueError("batch contains no predicted positions")

    want_params = "params" in selected
    want_prefix = "prefix" in selected
    grads: dict[str, np.ndarray] = {}
    total_nll = 0.0
    for seq in batch:
        if len(seq.ids) < 2:
            continue
        x_idx = np.asarray(seq.ids[:-1], dtype=np.intp)
        targets = np.asarray(seq.ids[1:], dtype=np.intp)
        logits, cache = _forward(params, prefix, x_idx)
        rowmax = logits.max(axis=-1, keepdims=True)
        expd = np.exp(logits - rowmax)
        denom = expd.sum(axis=-1, keepdims=True)
        log_probs = logits - rowmax - np.log(denom)
        for t in range(len(targets)):  # fixed left-to-right accumulation
            total_nll -= log_probs[t, targets[t]]
        dlogits = expd / denom
        dlogits[np.arange(len(targets)), targets] -= 1.0
        dlogits /= total_tokens
        _backward(params, prefix, cache, dlogits, grads, want_params, want_prefix)

    if want_prefix and prefix is not None and prefix.m > 0:
        # A prefix block some sequence never reached would otherwise be
        # missing from the dict; the selector contract says it exists.
        for li in range(params.config.n_layers):
            grads.setdefault(f"prefix.k.{li}", np.zeros_like(prefix.k_blocks[li]))
            grads.setdefault(f"prefix.v.{li}", np.zeros_like(prefix.v_blocks[li]))

    return total_nll / total_tokens, grads


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float((g * g).sum())
    return math.sqrt(total)


def clip_grads_(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``;
    returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


class AdamW:
    """Adaptive-moment update with decoupled weight decay, applied in place
    to a named tensor dict in sorted-name order (deterministic)."""

    def __init__(
        self,
        tensors: dict[str, np.ndarray],
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.tensors = tensors
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in tensors.items()}
        self.v = {name: np.zeros_like(arr) for name, arr in tensors.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.tensors):
            g = grads[name]
            p = self.tensors[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 1e-3
    weight_decay: float = 0.1
    epochs: int = 3
    batch_size: int = 8
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


def train_lm(
    params: LmParams,
    corpus: Iterable[CorpusRecord],
    hyper: TrainHyper,
) -> tuple[LmParams, list[float]]:
    """Train a copy of ``params`` on the corpus; returns the trained params
    and the per-epoch mean per-token loss curve. Deterministic shuffling
    from ``hyper.seed``; the input params are left untouched."""
    hyper.validate()
    records = list(corpus)
    if not records:
        raise ValueError("training corpus is empty")
    work = params.copy()
    cfg = work.config
    seqs = [encode(r.text, cfg.context_len) for r in records]
    rng = np.random.default_rng(hyper.seed)
    opt = AdamW(work.tensor_dict(), hyper.learning_rate, hyper.weight_decay)
    curve: list[float] = []
    for _ in range(hyper.epochs):
        order = rng.permutation(len(seqs))
        epoch_nll = 0.0
        epoch_tokens = 0
        for start in range(0, len(order), hyper.batch_size):
            batch = [seqs[i] for i in order[start : start + hyper.batch_size]]
            loss, grads = loss_and_grads(work, None, batch, trainable=("params",))
            clip_grads_(grads, hyper.grad_clip_norm)
            opt.step(grads)
            n_tok = sum(len(s.ids) - 1 for s in batch)
            epoch_nll += loss * n_tok
            epoch_tokens += n_tok
        curve.append(epoch_nll / epoch_tokens)
    return work, curve


def mean_nll(
    params: LmParams,
    corpus: Iterable[CorpusRecord],
    prefix: "DomainPrefix | None" = None,
) -> tuple[float, int]:
    """Mean per-token negative log-likelihood over a corpus and the token
    count it was averaged over."""
    total = 0.0
    tokens = 0
    for record in corpus:
        seq = encode(record.text, params.config.context_len)
        total -= log_likelihood(params, prefix, seq)
        tokens += len(seq.ids) - 1
    if tokens == 0:
        raise ValueError("corpus contains no predicted positions")
    return total / tokens, tokens


def sample(
    params: LmParams,
    prefix: "DomainPrefix | None",
    max_len: int,
    seed: int,
) -> TokenSequence:
    """Ancestral sampling: up to ``max_len`` text tokens, stopping early if
    EOS is drawn. Diagnostic only; sampled ids may include any vocab id."""
    cfg = params.config
    if max_len > cfg.context_len:
        raise ValueError(f"max_len {max_len} exceeds context {cfg.context_len}")
    rng = np.random.default_rng(seed)
    ids = [BOS_ID]
    for _ in range(max_len):
        x_idx = np.asarray(ids, dtype=np.intp)
        logits, _ = _forward(params, prefix, x_idx)
        row = logits[-1]
        rowmax = row.max()
        expd = np.exp(row - rowmax)
        probs = expd / expd.sum()
        token = int(rng.choice(cfg.vocab_size, p=probs))
        ids.append(token)
        if token == EOS_ID:
            return TokenSequence(tuple(ids), truncated=False)
    return TokenSequence(tuple(ids), truncated=True)
