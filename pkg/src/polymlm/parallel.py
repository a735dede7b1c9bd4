"""Tensor model parallelism over simulated in-process workers.

Each rank is a thread; all cross-rank data flow goes through rendezvous
collectives with per-call sequence numbers, so ordering violations are
detected (and deadlocks time out) instead of hanging. All-reduce sums in
fixed rank order, which makes every result bitwise reproducible.

Sharding follows the column/row layout that makes a transformer layer need
exactly two all-reduces forward and two backward: q/k/v and the FFN
expansion are split by output columns (whole attention heads per rank), the
attention output and FFN contraction by input rows, and the embedding plus
softmax by vocabulary rows.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ProtocolError, ShapeError
from .model import (
    ModelConfig,
    attention_heads,
    ffn_inner,
    padding_mask,
)
from .sampling import IGNORE_INDEX
from .tensor import Tensor


# ---------------------------------------------------------------------------
# Communicator
# ---------------------------------------------------------------------------


class _Round:
    __slots__ = ("kind", "sig", "slots", "arrived", "left", "complete")

    def __init__(self, world_size: int):
        self.kind: str | None = None
        self.sig = None
        self.slots: list = [None] * world_size
        self.arrived = 0
        self.left = 0
        self.complete = False


class CollectiveGroup:
    """Shared rendezvous state for one set of ranks."""

    def __init__(self, world_size: int, timeout: float = 60.0):
        if world_size < 1:
            raise ConfigError(f"world_size must be >= 1, got {world_size}")
        self.world_size = world_size
        self.timeout = timeout
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)
        self._rounds: dict[int, _Round] = {}
        self._next_seq = [0] * world_size
        self._poison: ProtocolError | None = None

    def abort(self, message: str) -> None:
        """Wake every waiting rank with a protocol failure."""
        with self._cv:
            if self._poison is None:
                self._poison = ProtocolError(message)
            self._cv.notify_all()

    def rendezvous(self, rank: int, kind: str, sig, payload) -> list:
        with self._cv:
            if self._poison is not None:
                raise ProtocolError(str(self._poison))
            seq = self._next_seq[rank]
            self._next_seq[rank] += 1
            rnd = self._rounds.get(seq)
            if rnd is None:
                rnd = _Round(self.world_size)
                self._rounds[seq] = rnd
            if rnd.kind is None:
                rnd.kind, rnd.sig = kind, sig
            elif rnd.kind != kind or rnd.sig != sig:
                err = ProtocolError(
                    f"collective order violation at sequence {seq}: rank {rank} "
                    f"called {kind}{sig}, other ranks called {rnd.kind}{rnd.sig}"
                )
                self._poison = err
                self._cv.notify_all()
                raise err
            rnd.slots[rank] = payload
            rnd.arrived += 1
            if rnd.arrived == self.world_size:
                rnd.complete = True
                self._cv.notify_all()
            else:
                deadline = time.monotonic() + self.timeout
                while not rnd.complete and self._poison is None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0 or not self._cv.wait(remaining):
                        if rnd.complete or self._poison is not None:
                            break
                        arrived = [r for r in range(self.world_size) if rnd.slots[r] is not None]
                        err = ProtocolError(
                            f"collective timeout at sequence {seq} ({kind}): ranks "
                            f"{arrived} arrived, rank {rank} waited {self.timeout}s; "
                            f"a rank diverged or stopped calling collectives"
                        )
                        self._poison = err
                        self._cv.notify_all()
                        raise err
                if self._poison is not None:
                    raise ProtocolError(str(self._poison))
            slots = rnd.slots
            rnd.left += 1
            if rnd.left == self.world_size:
                del self._rounds[seq]
            return slots


class Communicator:
    """Per-rank handle: all_reduce(sum), all_gather, broadcast, barrier.

    Byte counters record the local payload size per call; at world size 1
    every collective is the identity and nothing is counted.
    """

    def __init__(self, group: CollectiveGroup, rank: int):
        if not 0 <= rank < group.world_size:
            raise ConfigError(f"rank {rank} outside world of size {group.world_size}")
        self.group = group
        self.rank = rank
        self.bytes_by_kind: dict[str, int] = {"all_reduce": 0, "all_gather": 0, "broadcast": 0}
        self.calls_by_kind: dict[str, int] = {"all_reduce": 0, "all_gather": 0, "broadcast": 0}

    @property
    def world_size(self) -> int:
        return self.group.world_size

    def reset_counters(self) -> None:
        for k in self.bytes_by_kind:
            self.bytes_by_kind[k] = 0
            self.calls_by_kind[k] = 0

    def _count(self, kind: str, arr: np.ndarray) -> None:
        self.bytes_by_kind[kind] += arr.nbytes
        self.calls_by_kind[kind] += 1

    def all_reduce(self, arr: np.ndarray) -> np.ndarray:
        """Sum across ranks, reduced in rank order (bitwise reproducible)."""
        arr = np.asarray(arr, dtype=np.float64)
        if self.world_size == 1:
            return arr
        self._count("all_reduce", arr)
        slots = self.group.rendezvous(self.rank, "all_reduce", (arr.shape,), arr)
        acc = slots[0].copy()
        for r in range(1, self.world_size):
            acc += slots[r]
        return acc

    def all_gather(self, arr: np.ndarray) -> list[np.ndarray]:
        arr = np.asarray(arr, dtype=np.float64)
        if self.world_size == 1:
            return [arr]
        self._count("all_gather", arr)
        slots = self.group.rendezvous(self.rank, "all_gather", (arr.shape,), arr)
        return [s.copy() if r != self.rank else s for r, s in enumerate(slots)]

    def broadcast(self, arr: np.ndarray | None, src: int = 0) -> np.ndarray:
        if self.world_size == 1:
            return np.asarray(arr, dtype=np.float64)
        payload = np.asarray(arr, dtype=np.float64) if self.rank == src else None
        slots = self.group.rendezvous(self.rank, "broadcast", (src,), payload)
        out = slots[src]
        self._count("broadcast", out)
        return out if self.rank == src else out.copy()

    def barrier(self) -> None:
        if self.world_size == 1:
            return
        self.group.rendezvous(self.rank, "barrier", (), None)


def run_parallel(
    world_size: int, fn: Callable[[Communicator], object], timeout: float = 60.0
) -> list:
    """Run fn(comm) on every rank concurrently; returns results by rank.

    A failure on any rank poisons the group so peers blocked in collectives
    fail immediately instead of waiting for the timeout.
    """
    group = CollectiveGroup(world_size, timeout=timeout)
    results: list = [None] * world_size
    errors: list = [None] * world_size

    def runner(rank: int) -> None:
        comm = Communicator(group, rank)
        try:
            results[rank] = fn(comm)
        except BaseException as e:  # noqa: BLE001 - propagated to the driver
            errors[rank] = e
            group.abort(f"rank {rank} failed: {e}")

    threads = [
        threading.Thread(target=runner, args=(r,), daemon=True, name=f"rank{r}")
        for r in range(world_size)
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    # Prefer the root cause over cascade ProtocolErrors from poisoned peers.
    non_protocol = [e for e in errors if e is not None and not isinstance(e, ProtocolError)]
    if non_protocol:
        raise non_protocol[0]
    for e in errors:
        if e is not None:
            raise e
    return results


# ---------------------------------------------------------------------------
# Shard plan and parameter partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ShardPlan:
    world_size: int
    heads_per_rank: int
    head_dim: int
    ffn_per_rank: int
    vocab_bounds: tuple[int, ...]  # length world_size + 1

    @property
    def cols_per_rank(self) -> int:
        return self.heads_per_rank * self.head_dim

    def vocab_range(self, rank: int) -> tuple[int, int]:
        return self.vocab_bounds[rank], self.vocab_bounds[rank + 1]


def make_shard_plan(config: ModelConfig, world_size: int) -> ShardPlan:
    if config.heads % world_size != 0:
        raise ConfigError(
            f"heads {config.heads} not divisible by world_size {world_size}"
        )
    if config.ffn_inner % world_size != 0:
        raise ConfigError(
            f"ffn width {config.ffn_inner} not divisible by world_size {world_size}"
        )
    bounds = tuple(r * config.vocab // world_size for r in range(world_size + 1))
    return ShardPlan(
        world_size=world_size,
        heads_per_rank=config.heads // world_size,
        head_dim=config.head_dim,
        ffn_per_rank=config.ffn_inner // world_size,
        vocab_bounds=bounds,
    )


def shard_kind(name: str) -> str:
    """How a named model parameter is partitioned across ranks."""
    base = name.split(".", 1)[-1] if name.startswith("layer") else name
    if name in ("tok_emb", "out_bias"):
        return "vocab_rows"
    if base in ("wq", "wk", "wv"):
        return "column"
    if base in ("bq", "bk", "bv"):
        return "column_bias"
    if base == "wo":
        return "row"
    if base == "w1":
        return "ffn_column"
    if base == "b1":
        return "ffn_column_bias"
    if base == "w2":
        return "ffn_row"
    if base in ("bo", "b2"):
        return "rank0"
    return "replicated"


def shard_params(
    params: dict[str, Tensor], plan: ShardPlan, rank: int
) -> dict[str, Tensor]:
    """Slice a serial parameter set into this rank's shard (copies)."""
    c0 = rank * plan.cols_per_rank
    c1 = c0 + plan.cols_per_rank
    f0 = rank * plan.ffn_per_rank
    f1 = f0 + plan.ffn_per_rank
    v0, v1 = plan.vocab_range(rank)
    out: dict[str, Tensor] = {}
    for name, tensor in params.items():
        arr = tensor.data
        kind = shard_kind(name)
        if kind == "vocab_rows":
            piece = arr[v0:v1]
        elif kind == "column":
            piece = arr[:, c0:c1]
        elif kind == "column_bias":
            piece = arr[c0:c1]
        elif kind == "row":
            piece = arr[c0:c1, :]
        elif kind == "ffn_column":
            piece = arr[:, f0:f1]
        elif kind == "ffn_column_bias":
            piece = arr[f0:f1]
        elif kind == "ffn_row":
            piece = arr[f0:f1, :]
        elif kind == "rank0":
            if rank != 0:
                continue
            piece = arr
        else:
            piece = arr
        out[name] = Tensor(piece.copy(), requires_grad=True)
    return out


def merge_params(
    shards: list[dict[str, np.ndarray]], plan: ShardPlan
) -> dict[str, np.ndarray]:
    """Reassemble the serial parameter set, bitwise, from per-rank shards."""
    if len(shards) != plan.world_size:
        raise ConfigError(
            f"expected {plan.world_size} shards, got {len(shards)}"
        )
    merged: dict[str, np.ndarray] = {}
    for name in shards[0]:
        kind = shard_kind(name)
        parts = [np.asarray(s[name]) for s in shards if name in s]
        if kind in ("column", "ffn_column"):
            merged[name] = np.concatenate(parts, axis=1)
        elif kind in ("row", "ffn_row", "vocab_rows"):
            merged[name] = np.concatenate(parts, axis=0)
        elif kind in ("column_bias", "ffn_column_bias"):
            merged[name] = np.concatenate(parts, axis=0)
        else:  # replicated or rank0: take rank 0's copy
            merged[name] = parts[0].copy()
    return merged


# ---------------------------------------------------------------------------
# Differentiable collective ops
# ---------------------------------------------------------------------------


def ar_sum(t: Tensor, comm: Communicator) -> Tensor:
    """Forward all-reduce(sum); backward passes the gradient through."""

    def bwd(g: np.ndarray) -> None:
        t.accumulate_grad(g)

    return T.custom_op(comm.all_reduce(t.data), (t,), bwd, "ar_sum")


def copy_to_ranks(t: Tensor, comm: Communicator) -> Tensor:
    """Forward identity on a replicated tensor; backward all-reduces the
    partial gradients coming from each rank's sharded branch."""

    def bwd(g: np.ndarray) -> None:
        t.accumulate_grad(comm.all_reduce(g))

    return T.custom_op(t.data, (t,), bwd, "copy_to_ranks")


# ---------------------------------------------------------------------------
# Parallel linear layers
# ---------------------------------------------------------------------------


def column_parallel_linear(
    x: Tensor, w_shard: Tensor, b_shard: Tensor | None, comm: Communicator
) -> Tensor:
    """y_local = x @ W_shard (+ b_shard); ranks hold disjoint output columns."""
    if x.data.shape[-1] != w_shard.data.shape[0]:
        raise ShapeError(
            f"column-parallel shapes disagree: input {x.data.shape} vs "
            f"weight shard {w_shard.data.shape}"
        )
    x = copy_to_ranks(x, comm)
    y = T.matmul(x, w_shard)
    if b_shard is not None:
        y = T.add(y, b_shard)
    return y


def gather_columns(local: Tensor, comm: Communicator) -> Tensor:
    """Concatenate column shards in rank order (differentiable)."""
    pieces = comm.all_gather(local.data)
    widths = [int(p.shape[-1]) for p in pieces]
    lo = sum(widths[: comm.rank])
    hi = lo + widths[comm.rank]

    def bwd(g: np.ndarray) -> None:
        local.accumulate_grad(g[..., lo:hi])

    return T.custom_op(np.concatenate(pieces, axis=-1), (local,), bwd, "gather_columns")


def row_parallel_linear(
    x_local: Tensor, w_shard: Tensor, bias: Tensor | None, comm: Communicator
) -> Tensor:
    """Partial products summed by all-reduce; bias added once (rank 0)."""
    if x_local.data.shape[-1] != w_shard.data.shape[0]:
        raise ShapeError(
            f"row-parallel shapes disagree: input {x_local.data.shape} vs "
            f"weight shard {w_shard.data.shape}"
        )
    y = T.matmul(x_local, w_shard)
    if bias is not None and comm.rank == 0:
        y = T.add(y, bias)
    return ar_sum(y, comm)


def vocab_shard_embedding(weight_local: Tensor, ids: np.ndarray, lo: int, hi: int) -> Tensor:
    """Partial embedding lookup: rows outside [lo, hi) contribute zeros; the
    full embedding emerges after the cross-rank sum."""
    ids = np.asarray(ids, dtype=np.int64)
    in_range = (ids >= lo) & (ids < hi)
    local_ids = np.where(in_range, ids - lo, 0)
    out = weight_local.data[local_ids]
    out[~in_range] = 0.0

    def bwd(g: np.ndarray) -> None:
        gw = np.zeros_like(weight_local.data)
        flat_ids = local_ids.reshape(-1)
        flat_g = g.reshape(-1, weight_local.data.shape[1]).copy()
        flat_g[~in_range.reshape(-1)] = 0.0
        np.add.at(gw, flat_ids, flat_g)
        weight_local.accumulate_grad(gw)

    return T.custom_op(out, (weight_local,), bwd, "vocab_shard_embedding")


# ---------------------------------------------------------------------------
# Parallel transformer forward + vocabulary-sharded cross entropy
# ---------------------------------------------------------------------------


def parallel_forward_hidden(
    config: ModelConfig,
    plan: ShardPlan,
    params: dict[str, Tensor],
    comm: Communicator,
    input_ids: np.ndarray,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
    apply_final_norm: bool = True,
    mask_pad: bool = True,
) -> Tensor:
    """Sharded encoder forward; activations on the residual stream stay
    replicated so dropout masks must be identical across ranks (the rng is
    consumed in the same order on every rank)."""
    input_ids = np.asarray(input_ids, dtype=np.int64)
    b, t = input_ids.shape
    if t > config.max_seq:
        raise ShapeError(f"sequence length {t} exceeds configured maximum {config.max_seq}")
    if input_ids.max() >= config.vocab:
        raise ShapeError(f"token id {input_ids.max()} >= vocab {config.vocab}")
    use_dropout = train and config.dropout > 0.0
    if use_dropout and dropout_rng is None:
        raise ConfigError("training forward with dropout requires a dropout rng")

    def drop(x: Tensor) -> Tensor:
        return T.dropout(x, config.dropout, dropout_rng) if use_dropout else x

    mask = padding_mask(input_ids) if mask_pad else None
    v0, v1 = plan.vocab_range(comm.rank)
    tokens = ar_sum(vocab_shard_embedding(params["tok_emb"], input_ids, v0, v1), comm)
    positions = T.embedding(params["pos_emb"], np.arange(t))
    x = drop(T.add(tokens, positions))

    for i in range(config.layers):
        p = f"layer{i}."
        attn_in = (
            T.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], config.ln_eps)
            if config.pre_ln
            else x
        )
        attn_in = copy_to_ranks(attn_in, comm)
        attn_local = attention_heads(
            attn_in,
            params[p + "wq"], params[p + "bq"],
            params[p + "wk"], params[p + "bk"],
            params[p + "wv"], params[p + "bv"],
            plan.heads_per_rank, plan.head_dim, mask,
        )
        proj = T.matmul(attn_local, params[p + "wo"])
        if comm.rank == 0:
            proj = T.add(proj, params[p + "bo"])
        proj = drop(ar_sum(proj, comm))
        x = _residual_parallel(config, params, p, "ln1", x, proj)

        ffn_in = (
            T.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"], config.ln_eps)
            if config.pre_ln
            else x
        )
        ffn_in = copy_to_ranks(ffn_in, comm)
        h = ffn_inner(ffn_in, params[p + "w1"], params[p + "b1"])
        out = T.matmul(h, params[p + "w2"])
        if comm.rank == 0:
            out = T.add(out, params[p + "b2"])
        out = drop(ar_sum(out, comm))
        x = _residual_parallel(config, params, p, "ln2", x, out)

    if config.pre_ln and apply_final_norm:
        x = T.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], config.ln_eps)
    return x


def _residual_parallel(config, params, prefix, ln_name, x, sub):
    added = T.add(x, sub)
    if config.pre_ln:
        return added
    return T.layer_norm(
        added, params[prefix + ln_name + ".gain"], params[prefix + ln_name + ".bias"],
        config.ln_eps,
    )


def vocab_parallel_cross_entropy(
    logits_local: Tensor,
    targets,
    lo: int,
    hi: int,
    comm: Communicator,
    ignore_index: int = IGNORE_INDEX,
) -> Tensor:
    """Cross entropy over the full vocabulary without materializing full
    logits on any rank: gather per-row maxima, all-reduce the exp-sums and
    the target-logit contributions."""
    if logits_local.data.ndim != 2:
        raise ShapeError(f"expected 2-D local logits, got {logits_local.data.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n = logits_local.data.shape[0]
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} != ({n},)")
    active = t != ignore_index
    if not active.any():
        raise NumericError("cross_entropy: all positions ignored, loss undefined")

    local_max = logits_local.data.max(axis=1)
    gathered = comm.all_gather(local_max)
    m = gathered[0].copy()
    for r in range(1, len(gathered)):
        np.maximum(m, gathered[r], out=m)

    shifted = logits_local.data - m[:, None]
    sumexp = comm.all_reduce(np.exp(shifted).sum(axis=1))

    own = active & (t >= lo) & (t < hi)
    rows = np.nonzero(own)[0]
    target_local = np.zeros(n)
    target_local[rows] = shifted[rows, t[rows] - lo]
    target_shifted = comm.all_reduce(target_local)

    loss = T.nll_from_parts(np.where(active, target_shifted, 0.0), sumexp, active)
    n_active = int(active.sum())

    def bwd(g: np.ndarray) -> None:
        p = np.exp(shifted) / sumexp[:, None]
        p[rows, t[rows] - lo] -= 1.0
        p[~active] = 0.0
        logits_local.accumulate_grad(p * (float(g) / n_active))

    return T.custom_op(np.asarray(loss), (logits_local,), bwd, "vocab_parallel_ce")


def parallel_mlm_loss(
    config: ModelConfig,
    plan: ShardPlan,
    params: dict[str, Tensor],
    comm: Communicator,
    input_ids: np.ndarray,
    target_ids: np.ndarray,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """MLM loss with vocabulary-sharded logits; equals the serial loss."""
    hidden = parallel_forward_hidden(
        config, plan, params, comm, input_ids, train=train, dropout_rng=dropout_rng
    )
    hidden = copy_to_ranks(hidden, comm)
    logits_local = T.add(
        T.matmul(hidden, T.transpose(params["tok_emb"], (1, 0))), params["out_bias"]
    )
    b, t = np.asarray(input_ids).shape
    v0, v1 = plan.vocab_range(comm.rank)
    flat = T.reshape(logits_local, (b * t, v1 - v0))
    return vocab_parallel_cross_entropy(
        flat, np.asarray(target_ids).reshape(-1), v0, v1, comm
    )


# ---------------------------------------------------------------------------
# Communication accounting
# ---------------------------------------------------------------------------

_BYTES_PER_VALUE = 8  # float64


@dataclass(frozen=True)
class CommVolumeReport:
    world_size: int
    batch: int
    seq_len: int
    layer_allreduce_bytes: int
    vocab_parallel_bytes: int
    all_reduce_bytes: int
    all_gather_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.all_reduce_bytes + self.all_gather_bytes


def comm_volume_report(
    config: ModelConfig, plan: ShardPlan, batch: int, seq_len: int
) -> CommVolumeReport:
    """Analytic per-update (forward + backward) collective payload bytes,
    counted as each rank's local buffer size per call.

    Per layer: two all-reduces forward (attention output, FFN output) and two
    backward (the gradients entering each sharded block), all of
    batch*seq_len*hidden values. The vocabulary-sharded path adds the
    embedding-sum all-reduce, the gradient all-reduce into the softmax input,
    one per-row max all-gather, and two per-row all-reduces for the loss.
    """
    if plan.world_size == 1:
        return CommVolumeReport(1, batch, seq_len, 0, 0, 0, 0)
    stream = batch * seq_len * config.hidden * _BYTES_PER_VALUE
    rows = batch * seq_len * _BYTES_PER_VALUE
    layer_ar = config.layers * 4 * stream
    vocab_ar = 2 * stream + 2 * rows  # embedding fwd + hidden bwd + sumexp + target
    vocab_ag = rows  # per-row maxima
    return CommVolumeReport(
        world_size=plan.world_size,
        batch=batch,
        seq_len=seq_len,
        layer_allreduce_bytes=layer_ar,
        vocab_parallel_bytes=vocab_ar + vocab_ag,
        all_reduce_bytes=layer_ar + vocab_ar,
        all_gather_bytes=vocab_ag,
    )


# ---------------------------------------------------------------------------
# Sharded checkpoints
# ---------------------------------------------------------------------------


def save_sharded_checkpoint(
    path,
    rank_params: dict,
    config: ModelConfig,
    plan: ShardPlan,
    rank: int,
    meta: dict | None = None,
) -> None:
    from .checkpoint import save_checkpoint

    full_meta = dict(meta or {})
    full_meta["shard"] = {
        "world_size": plan.world_size,
        "rank": rank,
        "heads_per_rank": plan.heads_per_rank,
        "head_dim": plan.head_dim,
        "ffn_per_rank": plan.ffn_per_rank,
        "vocab_bounds": list(plan.vocab_bounds),
    }
    arrays = {
        k: (v.data if isinstance(v, Tensor) else np.asarray(v))
        for k, v in rank_params.items()
    }
    save_checkpoint(path, arrays, config, full_meta)


def merge_sharded_checkpoints(paths, out_path) -> None:
    """Reconstruct the serial checkpoint, bitwise, from per-rank files."""
    from .checkpoint import load_checkpoint, save_checkpoint

    loaded = [load_checkpoint(p) for p in paths]
    shard_meta = [m["shard"] for _, _, m in loaded]
    shard_meta_sorted = sorted(range(len(loaded)), key=lambda i: shard_meta[i]["rank"])
    world_size = shard_meta[0]["world_size"]
    if sorted(sm["rank"] for sm in shard_meta) != list(range(world_size)):
        raise ConfigError(
            f"incomplete shard set: have ranks {sorted(sm['rank'] for sm in shard_meta)}"
        )
    plan = ShardPlan(
        world_size=world_size,
        heads_per_rank=shard_meta[0]["heads_per_rank"],
        head_dim=shard_meta[0]["head_dim"],
        ffn_per_rank=shard_meta[0]["ffn_per_rank"],
        vocab_bounds=tuple(shard_meta[0]["vocab_bounds"]),
    )
    shards = [loaded[i][0] for i in shard_meta_sorted]
    config = loaded[0][1]
    meta = {k: v for k, v in loaded[0][2].items() if k != "shard"}
    save_checkpoint(out_path, merge_params(shards, plan), config, meta)
