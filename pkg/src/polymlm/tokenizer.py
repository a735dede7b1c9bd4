"""Unigram language-model subword tokenizer over raw text.

Training: seed candidate substrings by frequency, run EM on piece
probabilities over the segmentation lattice, prune lowest-loss-impact pieces
until the target size is reached. Encoding is Viterbi over character
positions; whitespace is represented by a visible marker character so raw
text round-trips exactly.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, DataError

SPECIAL_PIECES = ("<pad>", "<unk>", "<s>", "</s>", "<mask>")
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIAL_PIECES)

WORD_MARKER = "▁"  # visible stand-in for U+0020 inside pieces
UNK_LOGP = -100.0  # fixed penalty so coverage gaps never outscore real pieces

VOCAB_FILE_VERSION = "v1"


def _normalize(text: str) -> str:
    return text.replace(" ", WORD_MARKER)


def _denormalize(text: str) -> str:
    return text.replace(WORD_MARKER, " ")


@dataclass
class UnigramVocab:
    """Piece table with log probabilities; specials occupy ids 0..4."""

    entries: list[tuple[str, float]]
    _lookup: dict[str, int] = field(init=False, repr=False)
    max_piece_len: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.entries) < N_SPECIAL:
            raise ConfigError("vocab must contain the special pieces")
        specials = tuple(p for p, _ in self.entries[:N_SPECIAL])
        if specials != SPECIAL_PIECES:
            raise ConfigError(f"vocab specials {specials} != {SPECIAL_PIECES}")
        seen: set[str] = set()
        for piece, _ in self.entries:
            if not piece:
                raise ConfigError("empty piece in vocab")
            if piece in seen:
                raise ConfigError(f"duplicate piece {piece!r}")
            seen.add(piece)
        self._lookup = {p: i for i, (p, _) in enumerate(self.entries)}
        self.max_piece_len = max(
            (len(p) for p, _ in self.entries[N_SPECIAL:]), default=1
        )

    @property
    def size(self) -> int:
        return len(self.entries)

    def piece(self, token_id: int) -> str:
        return self.entries[token_id][0]

    def log_prob(self, token_id: int) -> float:
        return self.entries[token_id][1]

    def id_of(self, piece: str) -> int | None:
        return self._lookup.get(piece)

    def scored_items(self) -> list[tuple[str, float]]:
        return self.entries[N_SPECIAL:]

    def prob_sum(self) -> float:
        return sum(math.exp(lp) for _, lp in self.scored_items())


@dataclass
class TokenSequence:
    """Encoded text: vocab ids plus byte spans into the source string."""

    ids: list[int]
    offsets: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ids)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _seed_candidates(
    docs: list[str], target_scored: int, seed_multiplier: int, max_piece_len: int
) -> dict[str, float]:
    """Initial piece set: all single characters plus the most frequent
    repeated substrings, with probabilities proportional to occurrence count."""
    counts: Counter[str] = Counter()
    for d in docs:
        n = len(d)
        for i in range(n):
            limit = min(i + max_piece_len, n)
            for j in range(i + 1, limit + 1):
                counts[d[i : j]] += 1
    singles = {s: c for s, c in counts.items() if len(s) == 1}
    multi = [(s, c) for s, c in counts.items() if len(s) > 1 and c >= 2]
    multi.sort(key=lambda sc: (-sc[1], sc[0]))
    budget = max(0, seed_multiplier * target_scored - len(singles))
    chosen = dict(singles)
    for s, c in multi[:budget]:
        chosen[s] = c
    total = sum(chosen.values())
    return {s: math.log(c / total) for s, c in chosen.items()}


def _lattice_edges(
    text: str, logps: dict[str, float], max_len: int
) -> list[list[tuple[int, str, float]]]:
    """edges[i] = (end, piece, logp) for every piece matching text at i."""
    n = len(text)
    edges: list[list[tuple[int, str, float]]] = [[] for _ in range(n)]
    for i in range(n):
        limit = min(i + max_len, n)
        for j in range(i + 1, limit + 1):
            sub = text[i:j]
            lp = logps.get(sub)
            if lp is not None:
                edges[i].append((j, sub, lp))
    return edges


def _logsumexp2(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def _em_pass(docs: list[str], logps: dict[str, float], max_len: int) -> dict[str, float]:
    """One forward-backward expectation pass; returns renormalized log probs."""
    expected: dict[str, float] = {s: 0.0 for s in logps}
    for d in docs:
        n = len(d)
        if n == 0:
            continue
        edges = _lattice_edges(d, logps, max_len)
        alpha = [-math.inf] * (n + 1)
        alpha[0] = 0.0
        for i in range(n):
            if alpha[i] == -math.inf:
                continue
            base = alpha[i]
            for j, _, lp in edges[i]:
                alpha[j] = _logsumexp2(alpha[j], base + lp)
        beta = [-math.inf] * (n + 1)
        beta[n] = 0.0
        for i in range(n - 1, -1, -1):
            for j, _, lp in edges[i]:
                if beta[j] != -math.inf:
                    beta[i] = _logsumexp2(beta[i], lp + beta[j])
        z = alpha[n]
        if z == -math.inf:
            # single characters are always present, so every doc is coverable
            raise DataError(f"unsegmentable document during training: {d[:40]!r}")
        for i in range(n):
            if alpha[i] == -math.inf:
                continue
            for j, piece, lp in edges[i]:
                if beta[j] == -math.inf:
                    continue
                expected[piece] += math.exp(alpha[i] + lp + beta[j] - z)
    total = sum(expected.values())
    floor = total * 1e-12
    return {s: math.log(max(c, floor) / total) for s, c in expected.items()}


def _viterbi_usage(docs: list[str], logps: dict[str, float], max_len: int) -> Counter:
    usage: Counter[str] = Counter()
    for d in docs:
        segs = _viterbi_pieces(d, logps, max_len)
        usage.update(segs)
    return usage


def _viterbi_pieces(text: str, logps: dict[str, float], max_len: int) -> list[str]:
    """Best segmentation (pieces only) used during training; ties are
    irrelevant for expected-usage accounting."""
    n = len(text)
    best = [-math.inf] * (n + 1)
    back: list[int] = [-1] * (n + 1)
    best[n] = 0.0
    for i in range(n - 1, -1, -1):
        limit = min(i + max_len, n)
        for j in range(i + 1, limit + 1):
            lp = logps.get(text[i:j])
            if lp is None or best[j] == -math.inf:
                continue
            s = lp + best[j]
            if s > best[i]:
                best[i] = s
                back[i] = j
    pieces = []
    i = 0
    while i < n:
        j = back[i]
        pieces.append(text[i:j])
        i = j
    return pieces


def train_unigram(
    corpus,
    target_size: int,
    seed_multiplier: int = 4,
    prune_fraction: float = 0.25,
    max_piece_len: int = 8,
    em_iters: int = 4,
) -> UnigramVocab:
    """Train a unigram piece vocabulary of ``target_size`` total entries
    (special tokens included) on an iterable of document strings."""
    docs = [_normalize(d.rstrip("\n")) for d in corpus]
    docs = [d for d in docs if d]
    if not docs:
        raise ConfigError("training corpus is empty")
    alphabet = sorted({ch for d in docs for ch in d})
    target_scored = target_size - N_SPECIAL
    if target_scored < len(alphabet):
        raise ConfigError(
            f"target_size {target_size} too small: needs at least "
            f"{len(alphabet)} characters + {N_SPECIAL} special tokens"
        )

    logps = _seed_candidates(docs, target_scored, seed_multiplier, max_piece_len)
    while True:
        for _ in range(em_iters):
            logps = _em_pass(docs, logps, max_piece_len)
        surplus = len(logps) - target_scored
        if surplus <= 0:
            break
        usage = _viterbi_usage(docs, logps, max_piece_len)
        impacts: list[tuple[float, str]] = []
        for piece, lp in logps.items():
            if len(piece) == 1:
                continue  # single characters guarantee coverage
            used = usage.get(piece, 0)
            if used == 0:
                impacts.append((0.0, piece))
                continue
            without = dict(logps)
            del without[piece]
            alt = _viterbi_pieces(piece, without, max_piece_len)
            alt_score = sum(without[p] for p in alt)
            impacts.append((used * (lp - alt_score), piece))
        impacts.sort(key=lambda t: (t[0], t[1]))
        n_multi = len(impacts)
        drop = min(surplus, max(1, int(round(prune_fraction * n_multi))))
        for _, piece in impacts[:drop]:
            del logps[piece]
    logps = _em_pass(docs, logps, max_piece_len)

    scored = sorted(logps.items(), key=lambda kv: (-kv[1], kv[0]))
    entries = [(p, 0.0) for p in SPECIAL_PIECES] + scored
    return UnigramVocab(entries)


# ---------------------------------------------------------------------------
# Encoding / decoding
# ---------------------------------------------------------------------------


def viterbi_encode(vocab: UnigramVocab, text: str) -> TokenSequence:
    """Maximum-probability segmentation via dynamic programming.

    Ties resolve to fewer tokens, then leftmost-longest. Characters not
    covered by the vocab become single-character unk tokens with offsets
    preserved. Scores are accumulated right-to-left so an exhaustive
    enumerator folding the same way reproduces identical floats.
    """
    if text == "":
        return TokenSequence([], [])
    norm = _normalize(text)
    n = len(norm)
    max_len = vocab.max_piece_len
    lookup = vocab._lookup

    INF = math.inf
    score = [-INF] * (n + 1)
    ntok = [0] * (n + 1)
    nxt = [-1] * (n + 1)
    tok = [UNK_ID] * (n + 1)
    score[n] = 0.0
    for i in range(n - 1, -1, -1):
        limit = min(i + max_len, n)
        for j in range(i + 1, limit + 1):
            pid = lookup.get(norm[i:j])
            if pid is None or pid < N_SPECIAL or score[j] == -INF:
                continue
            s = vocab.entries[pid][1] + score[j]
            t = 1 + ntok[j]
            if (
                s > score[i]
                or (s == score[i] and (t < ntok[i] or (t == ntok[i] and j > nxt[i])))
            ):
                score[i], ntok[i], nxt[i], tok[i] = s, t, j, pid
        if nxt[i] == -1:
            # no covering piece: forced unk over one character
            score[i] = UNK_LOGP + score[i + 1]
            ntok[i] = 1 + ntok[i + 1]
            nxt[i] = i + 1
            tok[i] = UNK_ID

    # map char spans in the normalized text back to byte spans in the source
    byte_off = [0] * (n + 1)
    for k, ch in enumerate(text):
        byte_off[k + 1] = byte_off[k] + len(ch.encode("utf-8"))

    ids: list[int] = []
    offsets: list[tuple[int, int]] = []
    i = 0
    while i < n:
        j = nxt[i]
        ids.append(tok[i])
        offsets.append((byte_off[i], byte_off[j]))
        i = j
    return TokenSequence(ids, offsets)


def segmentation_score(vocab: UnigramVocab, ids: list[int]) -> float:
    """Right-folded log-probability of a token sequence (unk = penalty)."""
    s = 0.0
    for pid in reversed(ids):
        s = (UNK_LOGP if pid == UNK_ID else vocab.entries[pid][1]) + s
    return s


def decode(vocab: UnigramVocab, ids) -> str:
    """Concatenate piece strings; special tokens render as empty."""
    parts: list[str] = []
    for token_id in ids:
        token_id = int(token_id)
        if not 0 <= token_id < vocab.size:
            raise IndexError(f"token id {token_id} outside vocab of size {vocab.size}")
        if token_id < N_SPECIAL:
            continue
        parts.append(vocab.entries[token_id][0])
    return _denormalize("".join(parts))


# ---------------------------------------------------------------------------
# Vocab file format
# ---------------------------------------------------------------------------


def save_vocab(vocab: UnigramVocab, path) -> None:
    lines = [f"#unigram-vocab\t{VOCAB_FILE_VERSION}\tpieces={vocab.size}"]
    for piece, lp in vocab.entries:
        lines.append(f"{piece}\t{lp!r}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))


def load_vocab(path) -> UnigramVocab:
    try:
        with open(path, "rb") as fh:
            raw = fh.read().decode("utf-8")
    except OSError as e:
        raise DataError(f"cannot read vocab file {path}: {e}") from e
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"empty vocab file: {path}")
    header = lines[0].split("\t")
    if len(header) != 3 or header[0] != "#unigram-vocab" or header[1] != VOCAB_FILE_VERSION:
        raise DataError(f"bad vocab header in {path}: {lines[0]!r}")
    declared = int(header[2].removeprefix("pieces="))
    entries: list[tuple[str, float]] = []
    for line in lines[1:]:
        piece, lp = line.rsplit("\t", 1)
        entries.append((piece, float(lp)))
    if len(entries) != declared:
        raise DataError(
            f"vocab file {path} declares {declared} pieces, found {len(entries)}"
        )
    return UnigramVocab(entries)
