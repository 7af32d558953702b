"""Command line pipeline: synthesize, fit normalizers, train, evaluate, predict.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (one
per line, '#' starts a comment); explicitly passed flags override file
values, which override built-in defaults. Exit codes: 0 success, 1 usage
error, 2 unreadable or inconsistent data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys

import numpy as np

from . import baseline, binn, optim
from .data import (
    Checkpoint,
    CheckpointError,
    ShardError,
    SynthConfig,
    batch_indices,
    load_checkpoint,
    read_shard,
    save_checkpoint,
    synth_generate,
    video_feature,
    write_shard,
)
from .features import (
    ConvergenceError,
    apply_normalizer,
    fit_pca_whitening,
    fit_znorm,
)
from .hierarchy import VocabularyError, load_vocabulary, save_vocabulary
from .metrics import PredictionSet, evaluate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# Documented per-model defaults, applied when lr/iters are left unset.
MODEL_DEFAULTS = {
    "binn": {"lr": 0.001, "iters": 90000},
    "logreg": {"lr": 0.01, "iters": 35000},
}

_ADAM_M_PREFIX = "adam.m."
_ADAM_V_PREFIX = "adam.v."


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 1."""


@dataclasses.dataclass
class RunConfig:
    """Training/evaluation settings shared by the train-side subcommands."""

    model: str = "binn"
    features: str = "rgb"
    norm: str = "znorm"
    l2: bool = True
    lr: float | None = None
    iters: int | None = None
    batch_size: int = 1024
    weight_decay: float = 1e-8
    decay_factor: float = 0.1
    decay_every: int = 40000
    epsilon: float = 1e-6
    seed: int = 0
    log_every: int = 100
    top_k: int = 20

    def resolved(self) -> "RunConfig":
        """Copy with model-specific lr/iters defaults filled in."""
        out = dataclasses.replace(self)
        defaults = MODEL_DEFAULTS[self.model]
        if out.lr is None:
            out.lr = defaults["lr"]
        if out.iters is None:
            out.iters = defaults["iters"]
        return out

    def validate(self) -> None:
        if self.model not in MODEL_DEFAULTS:
            raise UsageError(f"unknown model {self.model!r}")
        if self.features not in ("rgb", "rgb+audio"):
            raise UsageError(f"unknown feature mode {self.features!r}")
        if self.norm not in ("znorm", "pca"):
            raise UsageError(f"unknown normalizer {self.norm!r}")
        if self.lr is not None and self.lr <= 0:
            raise UsageError(f"lr must be positive, got {self.lr}")
        if self.iters is not None and self.iters < 1:
            raise UsageError(f"iters must be at least 1, got {self.iters}")
        if self.batch_size < 1:
            raise UsageError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not (0 < self.decay_factor <= 1):
            raise UsageError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 0:
            raise UsageError(f"decay_every must be non-negative, got {self.decay_every}")
        if self.epsilon <= 0:
            raise UsageError(f"epsilon must be positive, got {self.epsilon}")
        if self.seed < 0:
            raise UsageError(f"seed must be non-negative, got {self.seed}")
        if self.log_every < 1:
            raise UsageError(f"log_every must be at least 1, got {self.log_every}")
        if self.top_k < 1:
            raise UsageError(f"top_k must be at least 1, got {self.top_k}")


_RUN_FIELD_TYPES = {
    "model": str,
    "features": str,
    "norm": str,
    "l2": bool,
    "lr": float,
    "iters": int,
    "batch_size": int,
    "weight_decay": float,
    "decay_factor": float,
    "decay_every": int,
    "epsilon": float,
    "seed": int,
    "log_every": int,
    "top_k": int,
}

_SYNTH_FIELD_TYPES = {
    "num_verticals": int,
    "num_entities": int,
    "max_parents": int,
    "dim": int,
    "audio_dim": int,
    "mean_entities_per_video": float,
    "noise_std": float,
    "prototype_scale": float,
    "num_train": int,
    "num_val": int,
    "seed": int,
}


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; '#' comments and blank lines are skipped."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(raw.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise UsageError(f"{path}:{lineno}: empty key or value")
        if key in pairs:
            raise UsageError(f"{path}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _coerce(key: str, value: str, typ):
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: expected a boolean, got {value!r}")
    try:
        return typ(value)
    except ValueError:
        raise UsageError(
            f"config key {key!r}: expected {typ.__name__}, got {value!r}"
        ) from None


def _merge_config(defaults, field_types: dict, config_path, flag_values: dict):
    """defaults < config file < explicitly passed flags."""
    merged = dataclasses.asdict(defaults)
    if config_path is not None:
        for key, value in parse_config_file(config_path).items():
            if key not in field_types:
                raise UsageError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value, field_types[key])
    for key, value in flag_values.items():
        if value is not None:
            merged[key] = value
    return type(defaults)(**merged)


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so main() owns exit codes."""

    def error(self, message):
        raise UsageError(message)


def _add_run_flags(sub) -> None:
    sub.add_argument("--config", default=None, help="key = value settings file")
    sub.add_argument("--model", choices=sorted(MODEL_DEFAULTS), default=None)
    sub.add_argument("--features", choices=["rgb", "rgb+audio"], default=None)
    sub.add_argument("--norm", choices=["znorm", "pca"], default=None)
    sub.add_argument(
        "--l2", action=argparse.BooleanOptionalAction, default=None,
        help="L2-normalize features after the fitted transform",
    )
    sub.add_argument("--lr", type=float, default=None)
    sub.add_argument("--iters", type=int, default=None)
    sub.add_argument("--batch-size", type=int, default=None)
    sub.add_argument("--weight-decay", type=float, default=None)
    sub.add_argument("--decay-factor", type=float, default=None)
    sub.add_argument("--decay-every", type=int, default=None)
    sub.add_argument("--epsilon", type=float, default=None)
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--log-every", type=int, default=None)
    sub.add_argument("--top-k", type=int, default=None)


def _run_config_from_args(args) -> RunConfig:
    flags = {key: getattr(args, key, None) for key in _RUN_FIELD_TYPES}
    cfg = _merge_config(RunConfig(), _RUN_FIELD_TYPES, args.config, flags)
    cfg.validate()
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="hlvc", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None)
    for key, typ in _SYNTH_FIELD_TYPES.items():
        p.add_argument(f"--{key.replace('_', '-')}", type=typ, default=None)
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("fit-norm", help="fit a feature normalizer only")
    p.add_argument("--train", required=True, help="training shard")
    p.add_argument("--out", required=True, help="output checkpoint")
    _add_run_flags(p)
    p.set_defaults(func=cmd_fit_norm)

    p = subs.add_parser("train", help="train a model")
    p.add_argument("--vocab", help="vocabulary file")
    p.add_argument("--train", help="training shard")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--log", default=None, help="also write loss lines to this file")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("evaluate", help="compute metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--shard", required=True)
    p.add_argument("--out", required=True, help="directory for report files")
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("predict", help="write top-k labels per video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--shard", required=True)
    p.add_argument("--out", required=True, help="output TSV file")
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    return parser


def cmd_synth(args) -> int:
    flags = {key: getattr(args, key, None) for key in _SYNTH_FIELD_TYPES}
    try:
        cfg = _merge_config(SynthConfig(), _SYNTH_FIELD_TYPES, args.config, flags)
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    hierarchy, train, val = synth_generate(cfg)
    os.makedirs(args.out, exist_ok=True)
    vocab_path = os.path.join(args.out, "vocab.txt")
    train_path = os.path.join(args.out, "train.shard")
    val_path = os.path.join(args.out, "val.shard")
    save_vocabulary(hierarchy, vocab_path)
    write_shard(train_path, train)
    write_shard(val_path, val)
    print(f"wrote {vocab_path} ({cfg.num_verticals} verticals, {cfg.num_entities} entities)")
    print(f"wrote {train_path} ({len(train)} videos)")
    print(f"wrote {val_path} ({len(val)} videos)")
    ents = np.array([rec.labels[1].size for rec in train], dtype=np.float64)
    verts = np.array([rec.labels[0].size for rec in train], dtype=np.float64)
    print(f"entities per video: mean={ents.mean():.4f}")
    print(f"verticals per video: mean={verts.mean():.4f}")
    return EXIT_OK


def _fit_normalizer(cfg: RunConfig, features: np.ndarray):
    if cfg.norm == "znorm":
        return fit_znorm(features, epsilon=cfg.epsilon, l2_after=cfg.l2)
    return fit_pca_whitening(features, epsilon=cfg.epsilon, l2_after=cfg.l2)


def _load_features(records, mode: str) -> np.ndarray:
    include_audio = mode == "rgb+audio"
    return np.stack([video_feature(rec, include_audio) for rec in records])


def _check_records(records, hierarchy) -> None:
    sizes = hierarchy.sizes
    for rec in records:
        if len(rec.labels) != len(sizes):
            raise ValueError(
                f"record {rec.video_id!r} has {len(rec.labels)} label layers, "
                f"vocabulary has {len(sizes)}"
            )
        for t, layer in enumerate(rec.labels):
            if layer.size and (layer[0] < 0 or layer[-1] >= sizes[t]):
                raise ValueError(
                    f"record {rec.video_id!r} labels out of range in layer {t}"
                )


def cmd_fit_norm(args) -> int:
    cfg = _run_config_from_args(args)
    records = read_shard(args.train)
    features = _load_features(records, cfg.features)
    stats = _fit_normalizer(cfg, features)
    config = dataclasses.asdict(cfg)
    config.update({"command": "fit-norm", "feature_dim": int(features.shape[1])})
    save_checkpoint(args.out, step=0, config=config, tensors={}, normalizer=stats)
    print(f"fitted {cfg.norm} on {features.shape[0]} videos, dim {features.shape[1]}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _multi_hot_matrix(records, layer: int, size: int) -> np.ndarray:
    z = np.zeros((len(records), size))
    for i, rec in enumerate(records):
        z[i, rec.labels[layer]] = 1.0
    return z


def _split_adam_tensors(tensors: dict):
    params = {}
    m = {}
    v = {}
    for name, arr in tensors.items():
        if name.startswith(_ADAM_M_PREFIX):
            m[name[len(_ADAM_M_PREFIX):]] = arr
        elif name.startswith(_ADAM_V_PREFIX):
            v[name[len(_ADAM_V_PREFIX):]] = arr
        else:
            params[name] = arr
    return params, m, v


def cmd_train(args) -> int:
    resume_ckpt: Checkpoint | None = None
    if args.resume is not None:
        resume_ckpt = load_checkpoint(args.resume)
        stored = {
            k: v for k, v in resume_ckpt.config.items() if k in _RUN_FIELD_TYPES
        }
        cfg = RunConfig(**stored)
        if args.iters is not None:
            cfg = dataclasses.replace(cfg, iters=args.iters)
        cfg.validate()
    else:
        cfg = _run_config_from_args(args)
    cfg = cfg.resolved()

    if args.vocab is None or args.train is None:
        raise UsageError("train requires --vocab and --train")
    hierarchy = load_vocabulary(args.vocab)
    records = read_shard(args.train)
    if not records:
        raise ValueError(f"training shard {args.train} is empty")
    _check_records(records, hierarchy)
    features = _load_features(records, cfg.features)
    dim = int(features.shape[1])

    if resume_ckpt is not None:
        if resume_ckpt.config.get("feature_dim") != dim:
            raise ValueError(
                f"checkpoint feature dim {resume_ckpt.config.get('feature_dim')} "
                f"does not match shard dim {dim}"
            )
        if list(resume_ckpt.config.get("layer_sizes", [])) != list(hierarchy.sizes):
            raise ValueError("checkpoint layer sizes do not match the vocabulary")
        if resume_ckpt.normalizer is None:
            raise ValueError("resume checkpoint carries no normalizer")
        stats = resume_ckpt.normalizer
    else:
        stats = _fit_normalizer(cfg, features)
    x_all = apply_normalizer(stats, features)

    targets = [
        _multi_hot_matrix(records, t, size) for t, size in enumerate(hierarchy.sizes)
    ]
    if cfg.model == "binn":
        params = binn.init_params(hierarchy.sizes, dim, cfg.seed)
    else:
        params = baseline.init_params(hierarchy.sizes[-1], dim)
    tensors = params.tensors()
    adam = optim.init_adam(
        tensors,
        cfg.lr,
        weight_decay=cfg.weight_decay,
        decay_factor=cfg.decay_factor,
        decay_every=cfg.decay_every,
    )
    if resume_ckpt is not None:
        stored_params, stored_m, stored_v = _split_adam_tensors(resume_ckpt.tensors)
        if set(stored_params) != set(tensors):
            raise ValueError("checkpoint tensors do not match the model")
        for name in tensors:
            if tensors[name].shape != stored_params[name].shape:
                raise ValueError(f"checkpoint tensor {name!r} has the wrong shape")
            tensors[name][...] = stored_params[name]
            adam.m[name][...] = stored_m[name]
            adam.v[name][...] = stored_v[name]
        adam.step = resume_ckpt.step

    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None

    def emit(line: str) -> None:
        print(line)
        if log_fh is not None:
            log_fh.write(line + "\n")

    try:
        n = len(records)
        steps_per_epoch = math.ceil(n / cfg.batch_size)
        step = adam.step
        while step < cfg.iters:
            epoch, skip = divmod(step, steps_per_epoch)
            for b, idx in enumerate(batch_indices(n, cfg.batch_size, cfg.seed, epoch)):
                if b < skip:
                    continue
                if step >= cfg.iters:
                    break
                xb = x_all[idx]
                if cfg.model == "binn":
                    loss_value, grads = binn.backward(
                        params, xb, [z[idx] for z in targets]
                    )
                    grad_tensors = grads.tensors()
                else:
                    loss_value, grad_w = baseline.loss_grad(params, xb, targets[-1][idx])
                    grad_tensors = {"weights": grad_w}
                if not math.isfinite(loss_value):
                    raise binn.NumericError(f"non-finite loss at step {step}")
                if step % cfg.log_every == 0:
                    emit(f"step={step} loss={loss_value:.6f} lr={optim.current_lr(adam):g}")
                optim.adam_step(adam, tensors, grad_tensors)
                step += 1
    finally:
        if log_fh is not None:
            log_fh.close()

    config = dataclasses.asdict(cfg)
    config.update(
        {
            "command": "train",
            "feature_dim": dim,
            "layer_sizes": list(hierarchy.sizes),
            "layer_names": [layer.name for layer in hierarchy.layers],
        }
    )
    out_tensors = dict(tensors)
    for name in tensors:
        out_tensors[_ADAM_M_PREFIX + name] = adam.m[name]
        out_tensors[_ADAM_V_PREFIX + name] = adam.v[name]
    save_checkpoint(
        args.out, step=adam.step, config=config, tensors=out_tensors, normalizer=stats
    )
    print(f"trained {cfg.model} for {adam.step} steps; wrote {args.out}")
    return EXIT_OK


def _restore_model(ckpt: Checkpoint, hierarchy, dim: int):
    cfg_model = ckpt.config.get("model")
    params_tensors, _, _ = _split_adam_tensors(ckpt.tensors)
    if cfg_model == "binn":
        return binn.BinnParams.from_tensors(hierarchy.sizes, dim, params_tensors)
    if cfg_model == "logreg":
        model = baseline.LogRegParams.from_tensors(params_tensors)
        if model.num_classes != hierarchy.sizes[-1] or model.dim != dim:
            raise ValueError("checkpoint weights do not match vocabulary/features")
        return model
    raise ValueError(f"checkpoint has unknown model {cfg_model!r}")


def _layer_scores(ckpt: Checkpoint, model, hierarchy, x: np.ndarray) -> dict:
    """Per-layer label probabilities, chunked to bound memory."""
    m = hierarchy.num_layers
    chunks = [x[i : i + 4096] for i in range(0, x.shape[0], 4096)]
    if ckpt.config.get("model") == "binn":
        per_layer = [[] for _ in range(m)]
        for chunk in chunks:
            probs = binn.predict(model, chunk)
            for t in range(m):
                per_layer[t].append(probs[t])
        return {t: np.concatenate(per_layer[t]) for t in range(m)}
    probs = np.concatenate([baseline.predict(model, chunk) for chunk in chunks])
    scores = {m - 1: probs}
    if m >= 2:
        scores[m - 2] = hierarchy.induce_vertical_scores(probs)
    return scores


def _prepare_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    hierarchy = load_vocabulary(args.vocab)
    if list(ckpt.config.get("layer_sizes", [])) != list(hierarchy.sizes):
        raise ValueError("checkpoint layer sizes do not match the vocabulary")
    records = read_shard(args.shard)
    if not records:
        raise ValueError(f"shard {args.shard} is empty")
    _check_records(records, hierarchy)
    features = _load_features(records, ckpt.config.get("features", "rgb"))
    if features.shape[1] != ckpt.config.get("feature_dim"):
        raise ValueError(
            f"shard feature dim {features.shape[1]} does not match checkpoint"
        )
    if ckpt.normalizer is None:
        raise ValueError("checkpoint carries no normalizer")
    x = apply_normalizer(ckpt.normalizer, features)
    model = _restore_model(ckpt, hierarchy, features.shape[1])
    scores = _layer_scores(ckpt, model, hierarchy, x)
    return ckpt, hierarchy, records, scores


def cmd_evaluate(args) -> int:
    ckpt, hierarchy, records, scores = _prepare_eval(args)
    top_k = args.top_k if args.top_k is not None else int(ckpt.config.get("top_k", 20))
    if top_k < 1:
        raise UsageError(f"top_k must be at least 1, got {top_k}")
    os.makedirs(args.out, exist_ok=True)
    for t in sorted(scores):
        layer = hierarchy.layers[t]
        pred = PredictionSet(scores[t], [rec.labels[t] for rec in records])
        report = evaluate(pred, layer=layer.name, top_k=top_k)
        base = os.path.join(args.out, f"eval_{layer.name}")
        with open(base + ".txt", "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
        with open(base + ".json", "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        print(
            f"{layer.name}: mean_ap={report.mean_ap:.6f} gap={report.gap:.6f} "
            f"perr={report.perr:.6f} hit_at_1={report.hit_at_1:.6f}"
        )
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt, hierarchy, records, scores = _prepare_eval(args)
    top_k = args.top_k if args.top_k is not None else int(ckpt.config.get("top_k", 20))
    if top_k < 1:
        raise UsageError(f"top_k must be at least 1, got {top_k}")
    lines = []
    for i, rec in enumerate(records):
        for t in sorted(scores):
            layer = hierarchy.layers[t]
            row = scores[t][i]
            top = np.argsort(-row, kind="stable")[: min(top_k, row.size)]
            for idx in top:
                lines.append(
                    f"{rec.video_id}\t{layer.name}\t{layer.labels[idx]}\t{row[idx]:.6f}"
                )
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote {len(lines)} predictions for {len(records)} videos to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        VocabularyError,
        ShardError,
        CheckpointError,
        FileNotFoundError,
        IsADirectoryError,
        NotADirectoryError,
        PermissionError,
        KeyError,
        ValueError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ConvergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def console_main() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    console_main()
