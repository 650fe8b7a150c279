"""Toy-scale experiment protocols shared by the scripts and the acceptance tests.

Each protocol pins its corpus, dimensions and optimiser settings here so the
numbers reported by ``scripts/`` and checked by the tests come from one place.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, replace
from statistics import median
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus import ParallelCorpus, encode_corpus, generate_copy_corpus, generate_variation_corpus
from .decoding import greedy_decode, sample_translations
from .inference import rate_diagnostic
from .training import TrainConfig, TrainResult, token_accuracy, train

# copy task: 200 pairs, vocabulary of 20 (reserved ids included), lengths 3-8
COPY_TRAIN = dict(vocab_size=20, num_pairs=200, len_range=(3, 8), seed=0)
COPY_DEV = dict(vocab_size=20, num_pairs=100, len_range=(3, 8), seed=1)
COPY_CONFIG = TrainConfig(kind="BASELINE", max_steps=2000, lr=3e-3, dev_every=0)

# variation corpus: 12 source content words, 2 equally frequent variants per source
VARIATION_TRAIN = dict(vocab_size=12, num_pairs=120, variants_per_source=2, seed=0)
VARIATION_DEV = dict(vocab_size=12, num_pairs=60, variants_per_source=2, seed=1)
VARIATION_CONFIG = TrainConfig(kind="SDEC", max_steps=2000, lr=1e-3, anneal_steps=1000,
                               dev_every=1000)
VARIATION_SEEDS = (1, 2, 3, 4, 5)


def copy_corpora() -> Tuple[ParallelCorpus, ParallelCorpus]:
    return generate_copy_corpus(**COPY_TRAIN), generate_copy_corpus(**COPY_DEV)


def variation_corpora() -> Tuple[ParallelCorpus, ParallelCorpus]:
    return generate_variation_corpus(**VARIATION_TRAIN), generate_variation_corpus(**VARIATION_DEV)


def run_copy_task(seed: int = 1, **overrides) -> Tuple[TrainResult, float]:
    """Train BASELINE on the copy corpus; returns the result and dev token accuracy."""
    train_c, dev_c = copy_corpora()
    config = replace(COPY_CONFIG, seed=seed, **overrides)
    result = train(config, train_c)
    dev_pairs = encode_corpus(dev_c, result.src_vocab, result.tgt_vocab)
    return result, token_accuracy(result.model, dev_pairs)


def run_variation(kind: str, seed: int, out_dir=None, **overrides) -> TrainResult:
    train_c, dev_c = variation_corpora()
    config = replace(VARIATION_CONFIG, kind=kind, seed=seed, **overrides)
    return train(config, train_c, dev_c, out_dir=out_dir)


def valid_variants(corpus: ParallelCorpus) -> "OrderedDict[tuple, set]":
    """Held-in source -> set of target variants seen with it."""
    table: "OrderedDict[tuple, set]" = OrderedDict()
    for src, tgt in corpus.pairs:
        table.setdefault(tuple(src), set()).add(tuple(tgt))
    return table


@dataclass
class DiversityReport:
    frac_two_valid: float       # sources with >= 2 distinct valid variants among the samples
    mean_distinct: float        # distinct surface forms per source, averaged
    frac_valid: float           # share of samples that are a valid variant

    def as_dict(self) -> Dict[str, float]:
        return {"frac_two_valid": self.frac_two_valid, "mean_distinct": self.mean_distinct,
                "frac_valid": self.frac_valid}


def sample_diversity(result: TrainResult, corpus: ParallelCorpus, num_samples: int = 100,
                     seed: int = 3) -> DiversityReport:
    rng = np.random.default_rng(seed)
    two_valid, distinct, valid_count, total = 0, [], 0, 0
    table = valid_variants(corpus)
    for src, valid in table.items():
        samples = sample_translations(result.model, result.src_vocab.encode(src), num_samples, rng)
        forms = {tuple(result.tgt_vocab.decode(s)) for s in samples}
        distinct.append(len(forms))
        two_valid += len(forms & valid) >= 2
        valid_count += sum(tuple(result.tgt_vocab.decode(s)) in valid for s in samples)
        total += len(samples)
    return DiversityReport(two_valid / len(table), float(np.mean(distinct)), valid_count / total)


def greedy_is_fixed(result: TrainResult, sources: Sequence[Sequence[str]], repeats: int) -> bool:
    """True when repeated greedy decodes give one string per source."""
    for src in sources:
        ids = result.src_vocab.encode(src)
        first = greedy_decode(result.model, ids)
        if any(greedy_decode(result.model, ids) != first for _ in range(repeats - 1)):
            return False
    return True


def dataset_rate(result: TrainResult, corpus: ParallelCorpus, seed: int = 0) -> float:
    pairs = encode_corpus(corpus, result.src_vocab, result.tgt_vocab)
    return rate_diagnostic(result.model, result.infnet, pairs, seed=seed).rate


def final_dev_metric(result: TrainResult) -> float:
    values = [row["dev_metric"] for row in result.metrics if row["dev_metric"] is not None]
    if not values:
        raise ValueError("run logged no dev metric")
    return values[-1]


def median_of(values: List[float]) -> float:
    return float(median(values))
