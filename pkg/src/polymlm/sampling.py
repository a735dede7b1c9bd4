"""Multilingual batch construction: smoothed language sampling, stream
chunking, and masked-token target generation.

Language i with corpus share p_i is drawn with probability
q_i = p_i^alpha / sum_j p_j^alpha; alpha < 1 upweights low-resource
languages. No language information ever enters the model inputs — tags ride
along for bookkeeping only.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .tokenizer import EOS_ID, N_SPECIAL, UnigramVocab, viterbi_encode

IGNORE_INDEX = -100

CATALOG_VERSION_LINE = "#corpus-catalog\tv1"


def seed_for(seed: int, tag: str, *extra: int) -> np.random.Generator:
    """Deterministic, platform-stable generator for a named random stream."""
    key = [int(seed), zlib.crc32(tag.encode("utf-8")), *[int(x) for x in extra]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


@dataclass
class CatalogEntry:
    language: str
    token_count: int
    shards: list[Path] = field(default_factory=list)


@dataclass
class CorpusCatalog:
    entries: list[CatalogEntry]

    def __post_init__(self) -> None:
        codes = [e.language for e in self.entries]
        if len(set(codes)) != len(codes):
            raise ConfigError(f"duplicate language codes in catalog: {codes}")
        for e in self.entries:
            if e.token_count < 0:
                raise ConfigError(f"negative token count for {e.language}")
        if not any(e.token_count > 0 for e in self.entries):
            raise ConfigError("catalog has no language with a positive token count")

    @property
    def languages(self) -> list[str]:
        return [e.language for e in self.entries]


@dataclass
class SamplingConfig:
    alpha: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass
class MlmBatch:
    input_ids: np.ndarray  # [B, T] int64, corrupted
    target_ids: np.ndarray  # [B, T] int64, IGNORE_INDEX at unselected positions
    languages: list[str]  # bookkeeping only, never a model input
    all_special: bool = False  # set when no position was maskable


def save_catalog(catalog: CorpusCatalog, path, shard_counts: dict[Path, int] | None = None) -> None:
    """Write one TSV row per shard. Without explicit per-shard counts the
    language total is attributed to its first shard."""
    lines = [CATALOG_VERSION_LINE]
    for e in catalog.entries:
        for k, shard in enumerate(e.shards):
            if shard_counts is not None:
                count = shard_counts[shard]
            else:
                count = e.token_count if k == 0 else 0
            lines.append(f"{e.language}\t{count}\t{shard}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_catalog(path) -> CorpusCatalog:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read catalog {path}: {e}") from e
    lines = [ln for ln in text.split("\n") if ln]
    if not lines or lines[0] != CATALOG_VERSION_LINE:
        raise DataError(f"bad catalog header in {path}")
    by_lang: dict[str, CatalogEntry] = {}
    order: list[str] = []
    for ln in lines[1:]:
        fields = ln.split("\t")
        if len(fields) != 3:
            raise DataError(f"malformed catalog row: {ln!r}")
        lang, count, shard = fields
        if lang not in by_lang:
            by_lang[lang] = CatalogEntry(lang, 0, [])
            order.append(lang)
        by_lang[lang].token_count += int(count)
        by_lang[lang].shards.append(Path(shard))
    return CorpusCatalog([by_lang[code] for code in order])


# ---------------------------------------------------------------------------
# Language distribution
# ---------------------------------------------------------------------------


def language_distribution(catalog: CorpusCatalog, config: SamplingConfig) -> np.ndarray:
    """q_i = p_i^alpha / sum_j p_j^alpha with p_i the corpus token share.

    Zero-count languages get exactly zero; alpha=1 returns p itself and
    alpha=0 returns the uniform distribution over non-empty languages.
    """
    counts = np.array([e.token_count for e in catalog.entries], dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ConfigError("all token counts are zero")
    p = counts / total
    nonzero = counts > 0
    if config.alpha == 1.0:
        return p
    q = np.zeros_like(p)
    if config.alpha == 0.0:
        q[nonzero] = 1.0 / nonzero.sum()
        return q
    q[nonzero] = p[nonzero] ** config.alpha
    q /= q.sum()
    return q


def draw_languages(
    codes: list[str], q: np.ndarray, seed: int, count: int
) -> Iterator[str]:
    """i.i.d. language draws from q; the same stream sample_stream uses."""
    rng = seed_for(seed, "language-choice")
    cumulative = np.cumsum(q)
    for _ in range(count):
        u = rng.random()
        idx = int(np.searchsorted(cumulative, u, side="right"))
        yield codes[min(idx, len(codes) - 1)]


# ---------------------------------------------------------------------------
# Stream chunking
# ---------------------------------------------------------------------------


def chunk_stream(token_iter, seq_len: int) -> Iterator[np.ndarray]:
    """Slice a token stream into exactly-seq_len windows.

    The final partial window (if any) is exposed afterwards via the
    generator's StopIteration value for conservation accounting.
    """
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    buf: list[int] = []
    for piece in token_iter:
        buf.extend(piece)
        while len(buf) >= seq_len:
            yield np.array(buf[:seq_len], dtype=np.int64)
            del buf[:seq_len]
    return buf  # remainder, reachable via StopIteration.value


def _shard_documents(shard: Path) -> Iterator[str]:
    try:
        with open(shard, "r", encoding="utf-8") as fh:
            for line in fh:
                doc = line.rstrip("\n")
                if doc:
                    yield doc
    except OSError as e:
        raise DataError(f"cannot read shard {shard}: {e}") from e


def _language_tokens(entry: CatalogEntry, vocab: UnigramVocab) -> Iterator[list[int]]:
    """One pass over a language's shards: per-document ids + eos sentinel."""
    for shard in entry.shards:
        for doc in _shard_documents(shard):
            ids = viterbi_encode(vocab, doc).ids
            ids.append(EOS_ID)
            yield ids


def _cycling_chunker(entry: CatalogEntry, vocab: UnigramVocab, seq_len: int):
    buf: list[int] = []
    while True:
        produced = False
        for ids in _language_tokens(entry, vocab):
            produced = True
            buf.extend(ids)
            while len(buf) >= seq_len:
                yield np.array(buf[:seq_len], dtype=np.int64)
                del buf[:seq_len]
        if not produced:
            raise DataError(f"language {entry.language} has no documents")


def sample_stream(
    catalog: CorpusCatalog,
    config: SamplingConfig,
    vocab: UnigramVocab,
    seq_len: int,
    count: int | None = None,
) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (language, token window) pairs, languages ~ q i.i.d."""
    q = language_distribution(catalog, config)
    codes = catalog.languages
    chunkers = {
        e.language: _cycling_chunker(e, vocab, seq_len)
        for e in catalog.entries
        if e.token_count > 0
    }
    rng = seed_for(config.seed, "language-choice")
    cumulative = np.cumsum(q)
    produced = 0
    while count is None or produced < count:
        u = rng.random()
        idx = int(np.searchsorted(cumulative, u, side="right"))
        lang = codes[min(idx, len(codes) - 1)]
        yield lang, next(chunkers[lang])
        produced += 1


# ---------------------------------------------------------------------------
# MLM masking
# ---------------------------------------------------------------------------


def apply_mlm_mask(
    tokens: np.ndarray,
    vocab_size: int,
    mask_rate: float,
    rng: np.random.Generator,
    languages: list[str] | None = None,
    mask_id: int = 4,
    n_special: int = N_SPECIAL,
) -> MlmBatch:
    """Select prediction targets and corrupt inputs.

    Each non-special position is selected independently with probability
    mask_rate; selected positions keep their original id as the target and
    are replaced by the mask token (80%), a random non-special piece (10%),
    or left unchanged (10%).
    """
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError(f"mask_rate must be in (0, 1), got {mask_rate}")
    tokens = np.asarray(tokens, dtype=np.int64)
    maskable = tokens >= n_special
    u = rng.random(tokens.shape)
    selected = maskable & (u < mask_rate)
    r = rng.random(tokens.shape)

    inputs = tokens.copy()
    to_mask = selected & (r < 0.8)
    to_random = selected & (r >= 0.8) & (r < 0.9)
    inputs[to_mask] = mask_id
    n_random = int(to_random.sum())
    if n_random:
        inputs[to_random] = rng.integers(n_special, vocab_size, size=n_random)

    targets = np.where(selected, tokens, IGNORE_INDEX)
    langs = languages if languages is not None else [""] * tokens.shape[0]
    return MlmBatch(
        input_ids=inputs,
        target_ids=targets,
        languages=langs,
        all_special=not bool(maskable.any()),
    )
