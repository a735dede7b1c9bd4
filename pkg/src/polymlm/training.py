"""Pretraining and fine-tuning loops.

Every source of randomness is a named, update-indexed stream derived from
the run seed, so (seed, config, data) fully determine each logged loss and
resuming from a checkpoint replays the identical trajectory bitwise. The
data pipeline itself is sequential; resume fast-forwards it by consuming
the already-trained updates' batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericError
from .model import (
    ModelConfig,
    TaskHead,
    forward_hidden,
    init_classification_head,
    init_params,
    init_span_head,
    mlm_loss,
    task_forward,
)
from .parallel import (
    Communicator,
    ShardPlan,
    make_shard_plan,
    merge_params,
    parallel_mlm_loss,
    run_parallel,
    save_sharded_checkpoint,
    shard_kind,
    shard_params,
)
from .sampling import (
    CorpusCatalog,
    SamplingConfig,
    apply_mlm_mask,
    sample_stream,
    seed_for,
)
from .tensor import Tensor
from .tokenizer import UnigramVocab


@dataclass
class TrainConfig:
    batch_size: int = 16
    total_updates: int = 2000
    seq_len: int = 64
    peak_lr: float = 1e-3
    warmup_updates: int = 100
    lr_schedule: str = "linear_decay"
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    grad_clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    mask_rate: float = 0.15

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_updates > self.total_updates:
            raise ConfigError(
                f"warmup_updates {self.warmup_updates} exceeds total_updates "
                f"{self.total_updates}"
            )
        if self.lr_schedule != "linear_decay":
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class FinetuneConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    seed: int = 0
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    grad_clip_norm: float = 1.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def ensure(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)


def grad_norm_sq(params: dict[str, Tensor]) -> float:
    """Sum of squared gradient entries; raises on non-finite gradients."""
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        total += float((p.grad * p.grad).sum())
    return total


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-6,
    weight_decay: float = 0.0,
    grad_clip_norm: float = 0.0,
    global_norm_sq: float | None = None,
) -> float:
    """One bias-corrected moment update with decoupled weight decay.

    Gradients are scaled by a global-norm clip factor before the step; pass
    ``global_norm_sq`` when the true norm spans multiple workers. Returns
    the clip coefficient applied.
    """
    state.ensure(params)
    if global_norm_sq is None:
        global_norm_sq = grad_norm_sq(params)
    coef = 1.0
    if grad_clip_norm > 0.0:
        norm = math.sqrt(global_norm_sq)
        if norm > grad_clip_norm:
            coef = grad_clip_norm / norm
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if coef != 1.0:
            g = g * coef
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay != 0.0:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update
    return coef


def lr_at(update: int, config: TrainConfig) -> float:
    """Linear warmup to peak_lr, then linear decay to zero."""
    if update < config.warmup_updates:
        return config.peak_lr * (update + 1) / config.warmup_updates
    span = config.total_updates - config.warmup_updates
    if span <= 0:
        return config.peak_lr
    remaining = config.total_updates - update
    return config.peak_lr * remaining / span


# ---------------------------------------------------------------------------
# Loss log
# ---------------------------------------------------------------------------


def format_loss_line(update: int, loss: float, tokens_seen: int, lr: float) -> str:
    return f"{update}\t{loss!r}\t{tokens_seen}\t{lr!r}"


def parse_loss_log(path) -> list[tuple[int, float, int, float]]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        u, loss, tok, lr = line.split("\t")
        rows.append((int(u), float(loss), int(tok), float(lr)))
    return rows


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    losses: list[float]
    final_params: dict[str, np.ndarray]
    checkpoint_paths: list[Path]
    loss_log_path: Path | None


def _next_batch(stream, batch_size: int):
    langs, rows = [], []
    for _ in range(batch_size):
        lang, ids = next(stream)
        langs.append(lang)
        rows.append(ids)
    return langs, np.stack(rows)


def _mlm_batch(stream, model_config, train_config, update):
    langs, tokens = _next_batch(stream, train_config.batch_size)
    rng = seed_for(train_config.seed, "mlm-mask", update)
    return apply_mlm_mask(
        tokens, model_config.vocab, train_config.mask_rate, rng, languages=langs
    )


def _checkpoint_meta(update: int, adam: AdamState) -> dict:
    return {"update": update, "adam_step": adam.step}


def _pack_training_state(params: dict[str, Tensor], adam: AdamState) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in params.items()}
    for name in params:
        arrays[f"adam.m.{name}"] = adam.m[name]
        arrays[f"adam.v.{name}"] = adam.v[name]
    return arrays


def _unpack_training_state(
    arrays: dict[str, np.ndarray], meta: dict
) -> tuple[dict[str, Tensor], AdamState, int]:
    params = {
        name: Tensor(arr, requires_grad=True)
        for name, arr in arrays.items()
        if not name.startswith("adam.")
    }
    adam = AdamState(step=int(meta.get("adam_step", 0)))
    for name in params:
        adam.m[name] = arrays[f"adam.m.{name}"].copy()
        adam.v[name] = arrays[f"adam.v.{name}"].copy()
    return params, adam, int(meta.get("update", 0))


def pretrain(
    model_config: ModelConfig,
    train_config: TrainConfig,
    catalog: CorpusCatalog,
    vocab: UnigramVocab,
    sampling: SamplingConfig | None = None,
    out_dir: Path | str | None = None,
    world_size: int = 1,
    resume_from: Path | str | None = None,
) -> PretrainResult:
    """Run the MLM pretraining loop, serially or over simulated ranks.

    Under parallelism every rank drives an identical data pipeline (same
    seed, zero extra communication) and optimizes its parameter shards;
    rank 0 owns logging and checkpointing.
    """
    if vocab.size != model_config.vocab:
        raise ConfigError(
            f"vocab size {vocab.size} != model vocab {model_config.vocab}"
        )
    sampling = sampling or SamplingConfig(seed=train_config.seed)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    if world_size == 1:
        return _pretrain_serial(
            model_config, train_config, catalog, vocab, sampling, out_path, resume_from
        )
    return _pretrain_parallel(
        model_config, train_config, catalog, vocab, sampling, out_path, world_size,
        resume_from,
    )


def _abort_reference(last_good: Path | None) -> str:
    if last_good is None:
        return "no checkpoint written yet"
    return f"last good checkpoint: {last_good}"


def _pretrain_serial(
    model_config, train_config, catalog, vocab, sampling, out_path, resume_from
) -> PretrainResult:
    if resume_from is not None:
        arrays, _, meta = load_checkpoint(resume_from)
        params, adam, start_update = _unpack_training_state(arrays, meta)
    else:
        params = init_params(model_config, train_config.seed)
        adam = AdamState()
        start_update = 0

    stream = sample_stream(catalog, sampling, vocab, train_config.seq_len)
    for _ in range(start_update * train_config.batch_size):
        next(stream)  # fast-forward the sequential pipeline on resume

    log_path = out_path / "loss.log" if out_path is not None else None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    losses: list[float] = []
    ckpts: list[Path] = []
    last_good: Path | None = Path(resume_from) if resume_from is not None else None
    try:
        for u in range(start_update, train_config.total_updates):
            batch = _mlm_batch(stream, model_config, train_config, u)
            for p in params.values():
                p.zero_grad()
            drop_rng = seed_for(train_config.seed, "dropout", u)
            try:
                loss = mlm_loss(
                    model_config, params, batch.input_ids, batch.target_ids,
                    train=model_config.dropout > 0.0, dropout_rng=drop_rng,
                )
                T.backward(loss)
                lr = lr_at(u, train_config)
                adam_step(
                    params, adam, lr,
                    beta1=train_config.adam_beta1, beta2=train_config.adam_beta2,
                    eps=train_config.adam_eps, weight_decay=train_config.weight_decay,
                    grad_clip_norm=train_config.grad_clip_norm,
                )
            except NumericError as e:
                raise NumericError(
                    f"aborted at update {u}: {e} ({_abort_reference(last_good)})"
                ) from e
            losses.append(loss.item())
            tokens_seen = train_config.batch_size * train_config.seq_len * (u + 1)
            if log_fh is not None:
                log_fh.write(format_loss_line(u, loss.item(), tokens_seen, lr) + "\n")
                log_fh.flush()
            if (
                out_path is not None
                and train_config.checkpoint_every > 0
                and (u + 1) % train_config.checkpoint_every == 0
            ):
                ckpt = out_path / f"checkpoint_{u + 1:06d}.ckpt"
                save_checkpoint(
                    ckpt, _pack_training_state(params, adam), model_config,
                    _checkpoint_meta(u + 1, adam),
                )
                ckpts.append(ckpt)
                last_good = ckpt
        if out_path is not None:
            final = out_path / "checkpoint_final.ckpt"
            save_checkpoint(
                final, _pack_training_state(params, adam), model_config,
                _checkpoint_meta(train_config.total_updates, adam),
            )
            ckpts.append(final)
    finally:
        if log_fh is not None:
            log_fh.close()
    return PretrainResult(
        losses=losses,
        final_params={name: p.data for name, p in params.items()},
        checkpoint_paths=ckpts,
        loss_log_path=log_path,
    )


def parallel_grad_norm_sq(
    params: dict[str, Tensor], comm: Communicator
) -> float:
    """Global squared gradient norm: sharded parameters are disjoint across
    ranks and summed by all-reduce; replicated ones carry identical
    gradients on every rank and are counted once."""
    sharded = 0.0
    replicated = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        part = float((p.grad * p.grad).sum())
        if shard_kind(name) == "replicated":
            replicated += part
        else:
            sharded += part
    total_sharded = float(comm.all_reduce(np.asarray(sharded)))
    return total_sharded + replicated


def _pretrain_parallel(
    model_config, train_config, catalog, vocab, sampling, out_path, world_size,
    resume_from,
) -> PretrainResult:
    plan = make_shard_plan(model_config, world_size)

    def worker(comm: Communicator):
        if resume_from is not None:
            rank_path = Path(resume_from) / f"rank{comm.rank:03d}.ckpt"
            arrays, _, meta = load_checkpoint(rank_path)
            params, adam, start_update = _unpack_training_state(arrays, meta)
        else:
            serial = init_params(model_config, train_config.seed)
            params = shard_params(serial, plan, comm.rank)
            adam = AdamState()
            start_update = 0
        stream = sample_stream(catalog, sampling, vocab, train_config.seq_len)
        for _ in range(start_update * train_config.batch_size):
            next(stream)
        log_lines: list[str] = []
        losses: list[float] = []
        ckpt_dirs: list[Path] = []
        for u in range(start_update, train_config.total_updates):
            batch = _mlm_batch(stream, model_config, train_config, u)
            for p in params.values():
                p.zero_grad()
            drop_rng = seed_for(train_config.seed, "dropout", u)
            loss = parallel_mlm_loss(
                model_config, plan, params, comm, batch.input_ids, batch.target_ids,
                train=model_config.dropout > 0.0, dropout_rng=drop_rng,
            )
            T.backward(loss)
            norm_sq = parallel_grad_norm_sq(params, comm)
            lr = lr_at(u, train_config)
            adam_step(
                params, adam, lr,
                beta1=train_config.adam_beta1, beta2=train_config.adam_beta2,
                eps=train_config.adam_eps, weight_decay=train_config.weight_decay,
                grad_clip_norm=train_config.grad_clip_norm,
                global_norm_sq=norm_sq,
            )
            losses.append(loss.item())
            tokens_seen = train_config.batch_size * train_config.seq_len * (u + 1)
            log_lines.append(format_loss_line(u, loss.item(), tokens_seen, lr))
            if (
                out_path is not None
                and train_config.checkpoint_every > 0
                and (u + 1) % train_config.checkpoint_every == 0
            ):
                ckpt_dir = out_path / f"checkpoint_{u + 1:06d}"
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                save_sharded_checkpoint(
                    ckpt_dir / f"rank{comm.rank:03d}.ckpt",
                    _pack_training_state(params, adam),
                    model_config, plan, comm.rank, _checkpoint_meta(u + 1, adam),
                )
                ckpt_dirs.append(ckpt_dir)
        return params, losses, log_lines, ckpt_dirs

    results = run_parallel(world_size, worker)
    shards = [{k: v.data for k, v in r[0].items()} for r in results]
    losses = results[0][1]
    log_lines = results[0][2]
    ckpts = list(dict.fromkeys(p for r in results for p in r[3]))
    merged = merge_params(shards, plan)

    log_path = None
    if out_path is not None:
        log_path = out_path / "loss.log"
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))
        final = out_path / "checkpoint_final.ckpt"
        save_checkpoint(
            final,
            merged,
            model_config,
            {"update": train_config.total_updates, "adam_step": train_config.total_updates},
        )
        ckpts.append(final)
    return PretrainResult(
        losses=losses,
        final_params=merged,
        checkpoint_paths=ckpts,
        loss_log_path=log_path,
    )


# ---------------------------------------------------------------------------
# Fine-tuning with cross-language early stopping
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    best_params: dict[str, np.ndarray]  # model + head, head keys prefixed "head."
    best_epoch: int  # 1-based
    best_average: float
    epoch_metrics: list[dict[str, float]]  # per epoch: language -> metric


def select_best_epoch(epoch_metrics: list[dict[str, float]]) -> tuple[int, float]:
    """Index (1-based) of the epoch maximizing the unweighted cross-language
    mean; ties resolve to the earliest epoch."""
    if not epoch_metrics:
        raise ConfigError("no epochs recorded")
    best_idx, best_avg = 0, -math.inf
    for i, row in enumerate(epoch_metrics):
        avg = sum(row.values()) / len(row)
        if avg > best_avg:
            best_idx, best_avg = i, avg
    return best_idx + 1, best_avg


def _classification_loss(config, params, head, input_ids, labels, train, drop_rng):
    hidden = forward_hidden(config, params, input_ids, train=train, dropout_rng=drop_rng)
    logits = task_forward(head, hidden)
    return T.cross_entropy(logits, labels)


def _span_loss(config, params, head, input_ids, starts, ends, train, drop_rng):
    hidden = forward_hidden(config, params, input_ids, train=train, dropout_rng=drop_rng)
    logits = task_forward(head, hidden)  # [B, T, 2]
    start_logits = T.index_axis(logits, 2, 0)
    end_logits = T.index_axis(logits, 2, 1)
    loss = T.add(
        T.cross_entropy(start_logits, starts), T.cross_entropy(end_logits, ends)
    )
    return T.scale(loss, 0.5)


def classify(config, params, head, input_ids, batch_size: int = 64) -> np.ndarray:
    """Predicted label ids, evaluated without dropout."""
    preds = []
    for i in range(0, len(input_ids), batch_size):
        hidden = forward_hidden(config, params, input_ids[i : i + batch_size])
        logits = task_forward(head, hidden)
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def span_predict(
    config, params, head, input_ids, max_answer_tokens: int = 30, batch_size: int = 64
) -> list[tuple[int, int]]:
    """Best (start, end) token pair with end >= start within a length cap."""
    out: list[tuple[int, int]] = []
    for i in range(0, len(input_ids), batch_size):
        hidden = forward_hidden(config, params, input_ids[i : i + batch_size])
        logits = task_forward(head, hidden).data
        for row in logits:
            start_scores, end_scores = row[:, 0], row[:, 1]
            best = (-math.inf, 0, 0)
            for s in range(len(start_scores)):
                e_hi = min(len(end_scores), s + max_answer_tokens)
                e = s + int(np.argmax(end_scores[s:e_hi]))
                score = start_scores[s] + end_scores[e]
                if score > best[0]:
                    best = (score, s, e)
            out.append((best[1], best[2]))
    return out


def finetune(
    base_params: dict[str, np.ndarray],
    model_config: ModelConfig,
    head_kind: str,
    num_labels: int,
    train_data: tuple,
    valid_data: dict[str, tuple],
    config: FinetuneConfig,
    metric_fn=None,
) -> FinetuneResult:
    """Train a task head (plus the encoder) and keep the checkpoint with the
    best unweighted average validation metric across languages.

    ``train_data`` is (input_ids, *targets); ``valid_data`` maps language ->
    (input_ids, *targets). The default metric is label accuracy.
    """
    for lang, data in valid_data.items():
        if len(data[0]) == 0:
            raise ConfigError(f"empty validation set for language {lang!r}")
    if len(train_data[0]) == 0:
        raise ConfigError("empty training set")

    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in base_params.items()}
    if head_kind == "classification":
        head = init_classification_head(model_config, num_labels, config.seed)
    elif head_kind == "span":
        head = init_span_head(model_config, config.seed)
    else:
        raise ConfigError(f"unknown head kind {head_kind!r}")
    trainable = dict(params)
    for k, v in head.params.items():
        trainable[f"head.{k}"] = v
    adam = AdamState()

    n = len(train_data[0])
    epoch_metrics: list[dict[str, float]] = []
    best: FinetuneResult | None = None
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = seed_for(config.seed, "shuffle", epoch).permutation(n)
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            drop_rng = seed_for(config.seed, "ft-dropout", step)
            use_dropout = model_config.dropout > 0.0
            for p in trainable.values():
                p.zero_grad()
            if head_kind == "classification":
                loss = _classification_loss(
                    model_config, params, head, train_data[0][idx], train_data[1][idx],
                    use_dropout, drop_rng,
                )
            else:
                loss = _span_loss(
                    model_config, params, head, train_data[0][idx],
                    train_data[1][idx], train_data[2][idx], use_dropout, drop_rng,
                )
            T.backward(loss)
            adam_step(
                trainable, adam, config.lr,
                beta1=config.adam_beta1, beta2=config.adam_beta2,
                eps=config.adam_eps, weight_decay=config.weight_decay,
                grad_clip_norm=config.grad_clip_norm,
            )
            step += 1

        row: dict[str, float] = {}
        for lang, data in valid_data.items():
            if metric_fn is not None:
                row[lang] = metric_fn(model_config, params, head, data)
            else:
                preds = classify(model_config, params, head, data[0])
                row[lang] = float((preds == data[1]).mean())
        epoch_metrics.append(row)
        avg = sum(row.values()) / len(row)
        if best is None or avg > best.best_average:
            snapshot = {k: v.data.copy() for k, v in params.items()}
            for k, v in head.params.items():
                snapshot[f"head.{k}"] = v.data.copy()
            best = FinetuneResult(
                best_params=snapshot,
                best_epoch=epoch,
                best_average=avg,
                epoch_metrics=[],
            )
    assert best is not None
    best.epoch_metrics = epoch_metrics
    return best
