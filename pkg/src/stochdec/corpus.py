"""Synthetic parallel corpora, vocabularies and corpus I/O."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")

Pair = Tuple[List[str], List[str]]


@dataclass
class ParallelCorpus:
    pairs: List[Pair]
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for k, (src, tgt) in enumerate(self.pairs):
            if not src or not tgt:
                raise ValueError(f"pair {k}: empty sentence")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def sources(self) -> List[List[str]]:
        return [s for s, _ in self.pairs]

    def targets(self) -> List[List[str]]:
        return [t for _, t in self.pairs]


class Vocab:
    """Token <-> id map with the four reserved ids first."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: List[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> List[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK])
        return out

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split("\n")[:-1])


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int | None = None) -> Vocab:
    """Frequency-ranked vocabulary, ties broken lexicographically.

    ``max_size`` counts the reserved entries.
    """
    counts = Counter(t for s in sentences for t in s if t not in RESERVED)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max(0, max_size - len(RESERVED))]
    return Vocab(ranked)


# ---------------------------------------------------------------------------
# generators


def generate_copy_corpus(vocab_size: int, num_pairs: int, len_range: Tuple[int, int] = (3, 8),
                         seed: int = 0) -> ParallelCorpus:
    """Target equals source; tokens ``w0 .. w{vocab_size-5}`` drawn uniformly.

    ``vocab_size`` counts the four reserved ids.
    """
    lo, hi = len_range
    if vocab_size < 5:
        raise ValueError("vocab_size must be at least 5")
    if not 1 <= lo <= hi or num_pairs < 1:
        raise ValueError(f"invalid ranges: len_range={len_range}, num_pairs={num_pairs}")
    rng = np.random.default_rng(seed)
    words = [f"w{k}" for k in range(vocab_size - len(RESERVED))]
    pairs = []
    for _ in range(num_pairs):
        n = int(rng.integers(lo, hi + 1))
        sent = [words[k] for k in rng.integers(0, len(words), size=n)]
        pairs.append((sent, list(sent)))
    meta = {"generator": "copy", "seed": str(seed), "variants": "1",
            "vocab_size": str(vocab_size), "len_range": f"{lo},{hi}"}
    return ParallelCorpus(pairs, meta)


def variation_targets(source: Sequence[str], split: int, variants: int) -> List[List[str]]:
    """All target variants of one source ``A.. B.. verb``.

    ``split`` is the length of the first noun block.  Variant k puts the two
    translated blocks in order ``k % 2`` and uses verb synonym k; the final
    agreement marker depends only on the first block, so it is identical
    across variants.
    """
    block_a = [w.upper() for w in source[:split]]
    block_b = [w.upper() for w in source[split:-1]]
    verb = source[-1]
    agreement = f"agr{int(source[0][1:]) % 3}"
    out = []
    for k in range(variants):
        body = block_a + block_b if k % 2 == 0 else block_b + block_a
        out.append(body + [f"{verb.upper()}_{k}", agreement])
    return out


def generate_variation_corpus(vocab_size: int, num_pairs: int, variants_per_source: int = 2,
                              seed: int = 0, block_len: Tuple[int, int] = (1, 2)
                              ) -> ParallelCorpus:
    """Source sentences with several equally valid translations.

    Sources are ``n.. n.. v`` (two noun blocks and a verb) over
    ``vocab_size`` source content words.  Each distinct source is emitted
    ``variants_per_source`` times, paired once with each variant from
    :func:`variation_targets`.  Nothing in the source says which variant a
    pair uses.
    """
    if variants_per_source < 2:
        raise ValueError("variants_per_source must be at least 2")
    n_verbs = max(2, vocab_size // 5)
    n_nouns = vocab_size - n_verbs
    if n_nouns < 4:
        raise ValueError(f"vocab_size {vocab_size} too small for disjoint variant lexicons")
    lo, hi = block_len
    rng = np.random.default_rng(seed)
    nouns = [f"n{k}" for k in range(n_nouns)]
    verbs = [f"v{k}" for k in range(n_verbs)]

    n_sources = -(-num_pairs // variants_per_source)
    seen: set = set()
    sources: List[Tuple[List[str], int]] = []
    attempts = 0
    while len(sources) < n_sources:
        attempts += 1
        if attempts > 1000 * n_sources:
            raise ValueError("vocab_size too small for the requested number of distinct sources")
        la, lb = (int(x) for x in rng.integers(lo, hi + 1, size=2))
        picks = rng.choice(n_nouns, size=la + lb, replace=False)
        sent = [nouns[k] for k in picks] + [verbs[int(rng.integers(n_verbs))]]
        key = tuple(sent)
        if key in seen:
            continue
        seen.add(key)
        sources.append((sent, la))

    pairs: List[Pair] = []
    for k in range(variants_per_source):
        for sent, split in sources:
            pairs.append((list(sent), variation_targets(sent, split, variants_per_source)[k]))
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order[:num_pairs]]
    meta = {"generator": "variation", "seed": str(seed),
            "variants": str(variants_per_source), "vocab_size": str(vocab_size)}
    return ParallelCorpus(pairs, meta)


# ---------------------------------------------------------------------------
# I/O


def read_parallel_corpus(src_path, tgt_path) -> ParallelCorpus:
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"line-count mismatch: {src_path} has {len(src_lines)} lines, "
                         f"{tgt_path} has {len(tgt_lines)}")
    pairs = []
    for k, (s, t) in enumerate(zip(src_lines, tgt_lines), start=1):
        for path, line in ((src_path, s), (tgt_path, t)):
            if not line.strip():
                raise ValueError(f"{path}: blank line {k}")
        pairs.append((s.split(), t.split()))
    meta = {}
    meta_path = Path(str(src_path) + ".meta")
    if meta_path.exists():
        meta = read_key_values(meta_path)
    return ParallelCorpus(pairs, meta)


def _read_lines(path) -> List[str]:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValueError(f"{path}: not valid UTF-8 ({exc})") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def write_parallel_corpus(corpus: ParallelCorpus, src_path, tgt_path):
    Path(src_path).write_text("".join(" ".join(s) + "\n" for s, _ in corpus.pairs),
                              encoding="utf-8")
    Path(tgt_path).write_text("".join(" ".join(t) + "\n" for _, t in corpus.pairs),
                              encoding="utf-8")
    if corpus.meta:
        write_key_values(Path(str(src_path) + ".meta"), corpus.meta)


def read_key_values(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def write_key_values(path, values: Dict[str, object]):
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()), encoding="utf-8")


# ---------------------------------------------------------------------------
# batching


@dataclass
class TokenBatch:
    src: np.ndarray       # [B, S] source ids, PAD-padded
    tgt: np.ndarray       # [B, T] rows are BOS ... EOS PAD*
    src_len: np.ndarray
    tgt_len: np.ndarray   # includes BOS and EOS

    @property
    def src_mask(self) -> np.ndarray:
        return np.arange(self.src.shape[1])[None, :] < self.src_len[:, None]

    @property
    def tgt_mask(self) -> np.ndarray:
        return np.arange(self.tgt.shape[1])[None, :] < self.tgt_len[:, None]

    def __len__(self):
        return self.src.shape[0]

    @property
    def num_target_tokens(self) -> int:
        return int((self.tgt_len - 1).sum())


def make_batch(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]]) -> TokenBatch:
    """Pad encoded (source ids, target ids) pairs; BOS/EOS are added here."""
    if not pairs:
        raise ValueError("make_batch: no pairs")
    B = len(pairs)
    src_len = np.array([len(s) for s, _ in pairs])
    tgt_len = np.array([len(t) + 2 for _, t in pairs])
    if src_len.min() < 1 or tgt_len.min() < 3:
        raise ValueError("make_batch: empty sentence")
    src = np.full((B, src_len.max()), PAD, dtype=np.int64)
    tgt = np.full((B, tgt_len.max()), PAD, dtype=np.int64)
    for b, (s, t) in enumerate(pairs):
        src[b, :len(s)] = s
        tgt[b, :len(t) + 2] = [BOS, *t, EOS]
    return TokenBatch(src, tgt, src_len, tgt_len)


def encode_corpus(corpus: ParallelCorpus, src_vocab: Vocab, tgt_vocab: Vocab):
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in corpus.pairs]
