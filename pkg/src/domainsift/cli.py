"""Command-line pipeline driver.

One JSON config file describes a whole run; flags override individual
scalars (flag > file > default). Every command validates its inputs up
front and reports all violations at once, writes nothing on validation
failure, never overwrites outputs without --force, and stamps every output
file with a deterministic provenance header (config hash, version, seeds),
so reruns with unchanged inputs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .baselines import (
    BaselineScore,
    build_profile,
    dsir_score,
    ppl_score,
    random_select,
    select_topk_by,
)
from .checkpoint import CheckpointError, load_params, save_params
from .corpus import (
    CorpusFormatError,
    DuplicateIdError,
    FramingError,
    read_corpus,
    write_corpus,
    write_scores,
)
from .evaluation import (
    DOMAIN_KINDS,
    DomainSpec,
    EvalReport,
    ablate_model_size,
    ablate_prefix_length,
    ablate_threshold,
    classification_metrics,
    downstream_eval,
    gen_domain,
    mix_pool,
)
from .prefix import DivergenceError, TuneHyper, init_prefix, load_prefix, save_prefix, tune_prefix
from .scoring import ScoreSummary, SelectionConfig, read_scores, score_stream, select
from .tiny_lm import ConfigError, LmConfig, ShapeError, TrainHyper, init_params, train_lm

log = logging.getLogger("domainsift")

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


class ConfigValidationError(ValueError):
    """All config violations found in one validation pass."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


class OutputExistsError(FileExistsError):
    """An output path exists and --force was not given."""


_PATH_DEFAULTS = {
    "pretrain_corpus": "pretrain.jsonl",
    "reference_corpus": "reference.jsonl",
    "reference_heldout": "reference_heldout.jsonl",
    "candidate_pool": "pool.jsonl",
    "base_checkpoint": "base.lmds",
    "prefix_checkpoint": "prefix.lmds",
    "tune_curve": "prefix_curve.json",
    "score_file": "scores.jsonl",
    "selected_corpus": "selected.jsonl",
    "report": "report.json",
    "ablation_dir": "ablations",
}

BASELINE_METHODS = ("ppl", "random", "dsir", "full")
ABLATIONS = ("threshold", "prefix_length", "model_size")


def default_config_dict(seed: int = 0) -> dict:
    """Full default run configuration as a plain dict."""
    pool = [
        {"kind": kind, "n_records": 250, "seed": seed + 11 + i}
        for i, kind in enumerate(DOMAIN_KINDS)
    ]
    pretrain = [
        {"kind": kind, "n_records": 200, "seed": seed + 21 + i}
        for i, kind in enumerate(DOMAIN_KINDS)
    ]
    return {
        "seed": seed,
        "workdir": "run",
        "paths": {},
        "model": {"d_model": 32, "n_layers": 2, "n_heads": 4, "d_ff": 64,
                  "context_len": 128, "vocab_size": 258, "seed": seed + 1},
        "train": {"learning_rate": 1e-3, "weight_decay": 0.1, "epochs": 3,
                  "batch_size": 8, "grad_clip_norm": 1.0, "seed": seed + 2},
        "tune": {"learning_rate": 1e-3, "weight_decay": 0.1, "epochs": 10,
                 "batch_size": 4, "grad_clip_norm": 1.0, "seed": seed + 3},
        "prefix": {"length": 30, "init_seed": seed + 4},
        "selection": {"tau": 1.0, "normalization": "per_token_mean",
                      "include_truncated": True, "workers": 1},
        "data": {
            "reference_kind": "arith",
            "length_range": [24, 96],
            "n_reference": 64, "reference_seed": seed + 31,
            "n_heldout": 48, "heldout_seed": seed + 32,
            "pool": pool, "pool_shuffle_seed": seed + 19,
            "pretrain": pretrain, "pretrain_shuffle_seed": seed + 29,
        },
        "downstream": {"learning_rate": 1e-3, "weight_decay": 0.1, "epochs": 3,
                       "batch_size": 8, "grad_clip_norm": 1.0, "seed": seed + 5},
        "baseline": {"budget": None, "random_seed": seed + 6},
        "evaluate": {"precision_ks": [50, 100, 200]},
        "ablate": {
            "taus": [0.8, 0.9, 1.0, 1.1, 1.2],
            "prefix_lengths": [1, 5, 10, 30, 60],
            "model_sizes": [
                {"d_model": 32, "n_layers": 2, "n_heads": 4, "d_ff": 64,
                 "context_len": 128, "vocab_size": 258, "seed": seed + 1},
                {"d_model": 64, "n_layers": 4, "n_heads": 8, "d_ff": 128,
                 "context_len": 128, "vocab_size": 258, "seed": seed + 1},
            ],
            "downstream": False,
        },
    }


def _merge(defaults: dict, override: dict, prefix: str, problems: list[str]) -> dict:
    merged = dict(defaults)
    for key, value in override.items():
        if key not in defaults:
            problems.append(f"unknown config key {prefix}{key}")
            continue
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge(defaults[key], value, f"{prefix}{key}.", problems)
        else:
            merged[key] = value
    return merged


@dataclass
class RunConfig:
    seed: int
    workdir: Path
    paths: dict[str, Path]
    model: LmConfig
    train: TrainHyper
    tune: TuneHyper
    prefix_len: int
    prefix_init_seed: int
    selection: SelectionConfig
    downstream: TrainHyper
    reference_kind: str
    reference_spec: DomainSpec
    heldout_spec: DomainSpec
    pool_specs: list[DomainSpec]
    pool_shuffle_seed: int
    pretrain_specs: list[DomainSpec]
    pretrain_shuffle_seed: int
    baseline_budget: int | None
    baseline_random_seed: int
    precision_ks: list[int]
    ablate_taus: list[float]
    ablate_prefix_lengths: list[int]
    ablate_model_sizes: list[LmConfig]
    ablate_downstream: bool
    config_hash: str = ""
    raw: dict = field(default_factory=dict)


def _specs_from(entries, length_range, prefix: str, problems: list[str]) -> list[DomainSpec]:
    specs = []
    for i, entry in enumerate(entries):
        try:
            spec = DomainSpec(
                kind=entry["kind"],
                n_records=entry["n_records"],
                length_range=tuple(entry.get("length_range", length_range)),
                seed=entry["seed"],
            )
            spec.validate()
            specs.append(spec)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{prefix}[{i}]: {exc}")
    return specs


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a run config; every violation is collected and
    reported in one pass."""
    problems: list[str] = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            file_dict = json.load(handle)
        if not isinstance(file_dict, dict):
            raise ConfigValidationError([f"{path}: config must be a JSON object"])
    except FileNotFoundError:
        raise ConfigValidationError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([f"{path}: invalid JSON ({exc.msg})"]) from None

    overrides = overrides or {}
    base_seed = overrides.get("seed", file_dict.get("seed", 0))
    if not isinstance(base_seed, int):
        problems.append("seed must be an integer")
        base_seed = 0
    merged = _merge(default_config_dict(base_seed), file_dict, "", problems)
    merged["seed"] = base_seed
    if "tau" in overrides:
        merged["selection"]["tau"] = overrides["tau"]
    if "workers" in overrides:
        merged["selection"]["workers"] = overrides["workers"]
    if "prefix_len" in overrides:
        merged["prefix"]["length"] = overrides["prefix_len"]

    workdir = Path(merged["workdir"])
    paths = {}
    for name, default_name in _PATH_DEFAULTS.items():
        given = merged["paths"].get(name) if isinstance(merged["paths"], dict) else None
        paths[name] = Path(given) if given else workdir / default_name

    def build(section: str, factory, **kwargs):
        try:
            obj = factory(**kwargs)
            if hasattr(obj, "validate"):
                obj.validate()
            return obj
        except (TypeError, ValueError) as exc:
            problems.append(f"{section}: {exc}")
            return None

    model = build("model", LmConfig, **merged["model"])
    train = build("train", TrainHyper, **merged["train"])
    tune = build("tune", TuneHyper, **merged["tune"])
    selection = build("selection", SelectionConfig, **merged["selection"])
    downstream = build("downstream", TrainHyper, **merged["downstream"])

    data = merged["data"]
    if data["reference_kind"] not in DOMAIN_KINDS:
        problems.append(f"data.reference_kind: unknown kind {data['reference_kind']!r}")
    length_range = data["length_range"]
    reference_spec = build(
        "data.reference", DomainSpec, kind=data["reference_kind"],
        n_records=data["n_reference"], length_range=tuple(length_range),
        seed=data["reference_seed"],
    )
    heldout_spec = build(
        "data.heldout", DomainSpec, kind=data["reference_kind"],
        n_records=data["n_heldout"], length_range=tuple(length_range),
        seed=data["heldout_seed"],
    )
    pool_specs = _specs_from(data["pool"], length_range, "data.pool", problems)
    pretrain_specs = _specs_from(data["pretrain"], length_range, "data.pretrain", problems)

    prefix_len = merged["prefix"]["length"]
    if not isinstance(prefix_len, int) or prefix_len < 0:
        problems.append("prefix.length must be an integer >= 0")

    model_sizes = []
    for i, entry in enumerate(merged["ablate"]["model_sizes"]):
        config = build(f"ablate.model_sizes[{i}]", LmConfig, **entry)
        if config is not None:
            model_sizes.append(config)

    taus = merged["ablate"]["taus"]
    if not taus or any(not (t > 0) for t in taus):
        problems.append("ablate.taus must be a non-empty list of positive reals")
    budget = merged["baseline"]["budget"]
    if budget is not None and (not isinstance(budget, int) or budget < 0):
        problems.append("baseline.budget must be null or a non-negative integer")

    if problems:
        raise ConfigValidationError(problems)

    normalized = json.dumps(merged, sort_keys=True)
    config_hash = hashlib.sha256(normalized.encode()).hexdigest()[:16]
    return RunConfig(
        seed=base_seed,
        workdir=workdir,
        paths=paths,
        model=model,
        train=train,
        tune=tune,
        prefix_len=prefix_len,
        prefix_init_seed=merged["prefix"]["init_seed"],
        selection=selection,
        downstream=downstream,
        reference_kind=data["reference_kind"],
        reference_spec=reference_spec,
        heldout_spec=heldout_spec,
        pool_specs=pool_specs,
        pool_shuffle_seed=data["pool_shuffle_seed"],
        pretrain_specs=pretrain_specs,
        pretrain_shuffle_seed=data["pretrain_shuffle_seed"],
        baseline_budget=budget,
        baseline_random_seed=merged["baseline"]["random_seed"],
        precision_ks=list(merged["evaluate"]["precision_ks"]),
        ablate_taus=list(taus),
        ablate_prefix_lengths=list(merged["ablate"]["prefix_lengths"]),
        ablate_model_sizes=model_sizes,
        ablate_downstream=bool(merged["ablate"]["downstream"]),
        config_hash=config_hash,
        raw=merged,
    )


def _provenance(cfg: RunConfig, command: str, **extra) -> dict:
    prov = {"tool": "domainsift", "version": __version__, "command": command,
            "config_hash": cfg.config_hash, "seed": cfg.seed}
    prov.update(extra)
    return prov


def _require_inputs(named_paths: dict[str, Path]) -> None:
    problems = [
        f"paths.{name}: input does not exist: {path}"
        for name, path in named_paths.items()
        if not path.exists()
    ]
    if problems:
        raise ConfigValidationError(problems)


def _guard_outputs(paths: list[Path], force: bool) -> None:
    clashes = [str(p) for p in paths if p.exists()]
    if clashes and not force:
        raise OutputExistsError(
            "refusing to overwrite without --force: " + ", ".join(clashes)
        )
    for p in paths:
        p.parent.mkdir(parents=True, exist_ok=True)


def cmd_gen_data(cfg: RunConfig, force: bool) -> int:
    outputs = [cfg.paths[n] for n in
               ("pretrain_corpus", "reference_corpus", "reference_heldout", "candidate_pool")]
    _guard_outputs(outputs, force)
    prov = _provenance(cfg, "gen-data")
    pretrain = mix_pool(cfg.pretrain_specs, cfg.pretrain_shuffle_seed)
    reference = gen_domain(cfg.reference_spec)
    heldout = gen_domain(cfg.heldout_spec)
    pool = mix_pool(cfg.pool_specs, cfg.pool_shuffle_seed)
    write_corpus(cfg.paths["pretrain_corpus"], pretrain, provenance=prov)
    write_corpus(cfg.paths["reference_corpus"], reference, provenance=prov)
    write_corpus(cfg.paths["reference_heldout"], heldout, provenance=prov)
    write_corpus(cfg.paths["candidate_pool"], pool, provenance=prov)
    print(f"gen-data pretrain={len(pretrain)} reference={len(reference)} "
          f"heldout={len(heldout)} pool={len(pool)}")
    return 0


def cmd_train_base(cfg: RunConfig, force: bool) -> int:
    _require_inputs({"pretrain_corpus": cfg.paths["pretrain_corpus"]})
    _guard_outputs([cfg.paths["base_checkpoint"]], force)
    records = list(read_corpus(cfg.paths["pretrain_corpus"]))
    params = init_params(cfg.model)
    trained, curve = train_lm(params, records, cfg.train)
    save_params(cfg.paths["base_checkpoint"], trained,
                provenance=_provenance(cfg, "train-base", loss_curve=curve))
    final = f"{curve[-1]:.6f}" if curve else "n/a"
    print(f"train-base records={len(records)} epochs={cfg.train.epochs} final_loss={final}")
    return 0


def cmd_tune_prefix(cfg: RunConfig, force: bool) -> int:
    _require_inputs({
        "base_checkpoint": cfg.paths["base_checkpoint"],
        "reference_corpus": cfg.paths["reference_corpus"],
    })
    _guard_outputs([cfg.paths["prefix_checkpoint"], cfg.paths["tune_curve"]], force)
    params = load_params(cfg.paths["base_checkpoint"])
    reference = list(read_corpus(cfg.paths["reference_corpus"]))
    fresh = init_prefix(params.config, cfg.prefix_len, cfg.prefix_init_seed)
    tuned, curve = tune_prefix(params, fresh, reference, cfg.tune)
    save_prefix(cfg.paths["prefix_checkpoint"], tuned,
                provenance=_provenance(cfg, "tune-prefix"))
    with open(cfg.paths["tune_curve"], "w", encoding="utf-8") as handle:
        json.dump({"_provenance": _provenance(cfg, "tune-prefix"), "curve": curve},
                  handle, indent=2, sort_keys=True)
        handle.write("\n")
    final = f"{curve[-1]:.6f}" if curve else "n/a"
    print(f"tune-prefix m={cfg.prefix_len} epochs={cfg.tune.epochs} final_ref_loglik={final}")
    return 0


def _load_model_and_prefix(cfg: RunConfig):
    params = load_params(cfg.paths["base_checkpoint"])
    prefix = load_prefix(cfg.paths["prefix_checkpoint"])
    if prefix.config_hash != params.config.hash():
        raise ShapeError("prefix checkpoint was tuned against a different model config")
    return params, prefix


def _format_summary(summary: ScoreSummary) -> str:
    mean = "none" if summary.mean_log_ratio is None else f"{summary.mean_log_ratio:.6f}"
    return (f"scored={summary.count} selected={summary.selected} "
            f"mean_log_ratio={mean} forward_passes={summary.forward_passes}")


def cmd_score(cfg: RunConfig, force: bool) -> int:
    _require_inputs({
        "base_checkpoint": cfg.paths["base_checkpoint"],
        "prefix_checkpoint": cfg.paths["prefix_checkpoint"],
        "candidate_pool": cfg.paths["candidate_pool"],
    })
    _guard_outputs([cfg.paths["score_file"]], force)
    params, prefix = _load_model_and_prefix(cfg)
    summary = score_stream(params, prefix, cfg.paths["candidate_pool"],
                           cfg.paths["score_file"], cfg.selection,
                           provenance=_provenance(cfg, "score"))
    print(f"score {_format_summary(summary)}")
    return 0


def cmd_select(cfg: RunConfig, force: bool) -> int:
    _require_inputs({
        "score_file": cfg.paths["score_file"],
        "candidate_pool": cfg.paths["candidate_pool"],
    })
    _guard_outputs([cfg.paths["selected_corpus"]], force)
    ids, retention = select(cfg.paths["score_file"], cfg.selection)
    wanted = set(ids)
    picked = (r for r in read_corpus(cfg.paths["candidate_pool"]) if r.id in wanted)
    count = write_corpus(cfg.paths["selected_corpus"], picked,
                         provenance=_provenance(cfg, "select", tau=cfg.selection.tau))
    print(f"select selected={count} retention={retention:.4f}")
    return 0


def _baseline_budget(cfg: RunConfig, n_pool: int) -> int:
    if cfg.baseline_budget is not None:
        if cfg.baseline_budget > n_pool:
            raise ValueError(f"baseline budget {cfg.baseline_budget} exceeds pool size {n_pool}")
        return cfg.baseline_budget
    if not cfg.paths["score_file"].exists():
        raise ConfigValidationError([
            "baseline.budget is null and paths.score_file does not exist; "
            "run the score command first or set an explicit budget"
        ])
    return sum(1 for sr in read_scores(cfg.paths["score_file"]) if sr.selected)


def cmd_baseline(cfg: RunConfig, method: str, force: bool) -> int:
    _require_inputs({"candidate_pool": cfg.paths["candidate_pool"]})
    if method == "ppl":
        _require_inputs({"base_checkpoint": cfg.paths["base_checkpoint"]})
    if method == "dsir":
        _require_inputs({"reference_corpus": cfg.paths["reference_corpus"]})
    score_path = cfg.workdir / f"baseline_{method}.jsonl"
    selected_path = cfg.workdir / f"baseline_{method}_selected.jsonl"
    _guard_outputs([score_path, selected_path], force)

    pool = list(read_corpus(cfg.paths["candidate_pool"]))
    if method == "full":
        k = len(pool)
        chosen = {r.id for r in pool}
        values = {r.id: 0.0 for r in pool}
    else:
        k = _baseline_budget(cfg, len(pool))
        if method == "ppl":
            params = load_params(cfg.paths["base_checkpoint"])
            values = {r.id: ppl_score(params, r) for r in pool}
            chosen = set(select_topk_by(sorted(values.items()), k, direction="asc"))
        elif method == "dsir":
            reference = list(read_corpus(cfg.paths["reference_corpus"]))
            ref_profile = build_profile(reference)
            cand_profile = build_profile(pool)
            values = {r.id: dsir_score(ref_profile, cand_profile, r) for r in pool}
            chosen = set(select_topk_by(sorted(values.items()), k, direction="desc"))
        elif method == "random":
            values = {r.id: 0.0 for r in pool}
            chosen = set(random_select([r.id for r in pool], k, cfg.baseline_random_seed))
        else:
            raise ValueError(f"unknown baseline method {method!r}")

    prov = _provenance(cfg, f"baseline-{method}", budget=k)
    lines = (BaselineScore(id=r.id, method=method, value=values[r.id],
                           selected=r.id in chosen) for r in pool)
    write_scores(score_path, lines, provenance=prov)
    write_corpus(selected_path, (r for r in pool if r.id in chosen), provenance=prov)
    print(f"baseline method={method} selected={len(chosen)} of={len(pool)}")
    return 0


def cmd_evaluate(cfg: RunConfig, force: bool) -> int:
    _require_inputs({
        "candidate_pool": cfg.paths["candidate_pool"],
        "score_file": cfg.paths["score_file"],
        "reference_heldout": cfg.paths["reference_heldout"],
        "base_checkpoint": cfg.paths["base_checkpoint"],
    })
    _guard_outputs([cfg.paths["report"]], force)
    pool = list(read_corpus(cfg.paths["candidate_pool"]))
    by_id = {r.id: r for r in pool}
    scores = [(sr.id, sr.log_ratio) for sr in read_scores(cfg.paths["score_file"])]
    labels = {rid: "in" if by_id[rid].label == cfg.reference_kind else "out"
              for rid, _ in scores}
    ks = [k for k in cfg.precision_ks if k <= len(scores)]
    metrics = classification_metrics(scores, labels, cfg.selection.tau, ks)

    log_tau = math.log(cfg.selection.tau)
    picked = [by_id[rid] for rid, value in scores if value > log_tau]
    downstream_ppl = None
    if picked:
        base = load_params(cfg.paths["base_checkpoint"])
        heldout = list(read_corpus(cfg.paths["reference_heldout"]))
        downstream_ppl = downstream_eval(base, picked, heldout, cfg.downstream).ppl

    report = EvalReport(
        auc=metrics.auc,
        precision_at_k=metrics.precision_at_k,
        f1_at_tau=metrics.f1_at_tau,
        retention=metrics.retention,
        downstream_ppl=downstream_ppl,
        seeds={"seed": cfg.seed, "train": cfg.train.seed, "tune": cfg.tune.seed,
               "downstream": cfg.downstream.seed},
        configs={"model_hash": cfg.model.hash(), "tau": cfg.selection.tau,
                 "normalization": cfg.selection.normalization},
    )
    report.save(cfg.paths["report"], provenance=_provenance(cfg, "evaluate"))
    downstream = "none" if downstream_ppl is None else f"{downstream_ppl:.4f}"
    print(f"evaluate auc={metrics.auc:.4f} f1={metrics.f1_at_tau:.4f} "
          f"retention={metrics.retention:.4f} downstream_ppl={downstream}")
    return 0


def _write_table(path: Path, provenance: dict, header: list[str],
                 rows: list[list[str]]) -> None:
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        handle.write("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip() + "\n")
        for row in rows:
            handle.write("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n")


def _fmt_opt(value: float | None, spec: str = ".4f") -> str:
    return "none" if value is None else format(value, spec)


def cmd_ablate(cfg: RunConfig, which: str, force: bool) -> int:
    out_dir = cfg.paths["ablation_dir"]
    json_path = out_dir / f"{which}.json"
    text_path = out_dir / f"{which}.txt"
    _guard_outputs([json_path, text_path], force)
    prov = _provenance(cfg, f"ablate-{which}")

    if which == "threshold":
        _require_inputs({
            "base_checkpoint": cfg.paths["base_checkpoint"],
            "prefix_checkpoint": cfg.paths["prefix_checkpoint"],
            "candidate_pool": cfg.paths["candidate_pool"],
        })
        params, prefix = _load_model_and_prefix(cfg)
        pool = list(read_corpus(cfg.paths["candidate_pool"]))
        downstream_args = {}
        if cfg.ablate_downstream:
            _require_inputs({"reference_heldout": cfg.paths["reference_heldout"]})
            downstream_args = dict(
                base=params,
                ref_heldout=list(read_corpus(cfg.paths["reference_heldout"])),
                train_hyper=cfg.downstream,
            )
        rows = ablate_threshold(pool, params, prefix, cfg.ablate_taus,
                                in_label=cfg.reference_kind, cfg=cfg.selection,
                                **downstream_args)
        payload = [{"tau": r.tau, "retention": r.retention, "f1": r.f1,
                    "downstream_ppl": r.downstream_ppl} for r in rows]
        table = [[f"{r.tau:.2f}", f"{r.retention:.4f}", f"{r.f1:.4f}",
                  _fmt_opt(r.downstream_ppl)] for r in rows]
        header = ["tau", "retention", "f1", "downstream_ppl"]
    elif which == "prefix_length":
        _require_inputs({
            "base_checkpoint": cfg.paths["base_checkpoint"],
            "reference_corpus": cfg.paths["reference_corpus"],
            "reference_heldout": cfg.paths["reference_heldout"],
        })
        params = load_params(cfg.paths["base_checkpoint"])
        ref = list(read_corpus(cfg.paths["reference_corpus"]))
        heldout = list(read_corpus(cfg.paths["reference_heldout"]))
        rows = ablate_prefix_length(ref, heldout, params, cfg.ablate_prefix_lengths,
                                    cfg.tune, init_seed=cfg.prefix_init_seed)
        payload = [{"m": r.m, "heldout_log_likelihood": r.heldout_log_likelihood,
                    "n_prefix_params": r.n_prefix_params} for r in rows]
        table = [[str(r.m), f"{r.heldout_log_likelihood:.6f}", str(r.n_prefix_params)]
                 for r in rows]
        header = ["m", "heldout_log_likelihood", "n_prefix_params"]
    elif which == "model_size":
        _require_inputs({
            "pretrain_corpus": cfg.paths["pretrain_corpus"],
            "reference_corpus": cfg.paths["reference_corpus"],
            "reference_heldout": cfg.paths["reference_heldout"],
            "candidate_pool": cfg.paths["candidate_pool"],
        })
        rows = ablate_model_size(
            cfg.ablate_model_sizes,
            list(read_corpus(cfg.paths["pretrain_corpus"])),
            list(read_corpus(cfg.paths["reference_corpus"])),
            list(read_corpus(cfg.paths["reference_heldout"])),
            list(read_corpus(cfg.paths["candidate_pool"])),
            in_label=cfg.reference_kind,
            train_hyper=cfg.train,
            tune_hyper=cfg.tune,
            prefix_len=cfg.prefix_len,
            prefix_seed=cfg.prefix_init_seed,
            cfg=cfg.selection,
            downstream_hyper=cfg.downstream if cfg.ablate_downstream else None,
        )
        payload = [{"config_hash": r.config_hash, "d_model": r.d_model,
                    "n_layers": r.n_layers, "auc": r.auc,
                    "downstream_ppl": r.downstream_ppl} for r in rows]
        table = [[r.config_hash[:12], str(r.d_model), str(r.n_layers),
                  f"{r.auc:.4f}", _fmt_opt(r.downstream_ppl)] for r in rows]
        header = ["config_hash", "d_model", "n_layers", "auc", "downstream_ppl"]
    else:
        raise ValueError(f"unknown ablation {which!r}")

    with open(json_path, "w", encoding="utf-8") as handle:
        json.dump({"_provenance": prov, "rows": payload}, handle, indent=2, sort_keys=True)
        handle.write("\n")
    _write_table(text_path, prov, header, table)
    print(f"ablate which={which} rows={len(table)} out={json_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domainsift",
        description="Domain-prefix likelihood-ratio corpus selection pipeline.",
    )
    parser.add_argument("--version", action="version", version=f"domainsift {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, **extra_args):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the base seed")
        p.add_argument("--workers", type=int, default=None, help="override selection.workers")
        p.add_argument("--tau", type=float, default=None, help="override selection.tau")
        p.add_argument("--prefix-len", type=int, default=None, help="override prefix.length")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        for flag, kwargs in extra_args.items():
            p.add_argument(flag, **kwargs)
        return p

    add("gen-data", "generate the synthetic corpora")
    add("train-base", "train the base model on the pretrain corpus")
    add("tune-prefix", "tune the domain prefix on the reference corpus")
    add("score", "score the candidate pool with and without the prefix")
    add("select", "apply the threshold rule to a score file")
    add("baseline", "run a baseline selection method",
        **{"--method": dict(required=True, choices=BASELINE_METHODS)})
    add("evaluate", "compute the evaluation report")
    add("ablate", "run an ablation sweep",
        **{"--which": dict(required=True, choices=ABLATIONS)})
    return parser


def _overrides_from(args: argparse.Namespace) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.tau is not None:
        overrides["tau"] = args.tau
    if getattr(args, "prefix_len", None) is not None:
        overrides["prefix_len"] = args.prefix_len
    return overrides


_ERROR_CATEGORIES: list[tuple[type, str, int]] = [
    (ConfigValidationError, "config", 2),
    (OutputExistsError, "exists", 2),
    (ConfigError, "config", 2),
    (CorpusFormatError, "corpus", 1),
    (DuplicateIdError, "corpus", 1),
    (FramingError, "corpus", 1),
    (CheckpointError, "checkpoint", 1),
    (ShapeError, "shape", 1),
    (DivergenceError, "divergence", 1),
    (FileNotFoundError, "io", 1),
    (ValueError, "argument", 2),
    (OSError, "io", 1),
]


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("DOMAINSIFT_LOG", "warn").lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = _build_parser().parse_args(argv)
    commands = {
        "gen-data": lambda cfg: cmd_gen_data(cfg, args.force),
        "train-base": lambda cfg: cmd_train_base(cfg, args.force),
        "tune-prefix": lambda cfg: cmd_tune_prefix(cfg, args.force),
        "score": lambda cfg: cmd_score(cfg, args.force),
        "select": lambda cfg: cmd_select(cfg, args.force),
        "baseline": lambda cfg: cmd_baseline(cfg, args.method, args.force),
        "evaluate": lambda cfg: cmd_evaluate(cfg, args.force),
        "ablate": lambda cfg: cmd_ablate(cfg, args.which, args.force),
    }
    try:
        cfg = load_config(args.config, _overrides_from(args))
        return commands[args.command](cfg)
    except Exception as exc:  # mapped to one machine-parseable line
        for exc_type, category, code in _ERROR_CATEGORIES:
            if isinstance(exc, exc_type):
                message = " ".join(str(exc).split())
                print(f"domainsift-error category={category} message={message}",
                      file=sys.stderr)
                log.debug("traceback", exc_info=exc)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
