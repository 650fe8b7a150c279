"""Test-time decoding: greedy, beam search and latent sampling.

Greedy and beam decoding fix every latent at its prior mean, unrolled along
the hypothesis being extended.  :func:`sample_translations` draws latents from
the prior instead but still picks the argmax word at each position.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, TokenBatch
from .layers import RnnState
from .models import (BASELINE, SDEC, LatentMode, Seq2Seq, SourceEncoding, decoder_step,
                     encode_source,
                     initial_decoder_state, prior_initial, prior_step, teacher_forced)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


@dataclass
class Hypothesis:
    tokens: Tuple[int, ...]
    score: float
    state: Optional[RnnState] = field(default=None, repr=False)
    z: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def words(self) -> List[int]:
        """Tokens without the terminal EOS."""
        return list(self.tokens[:-1] if self.finished else self.tokens)


class _Stepper:
    """Runs decoder steps for a set of hypotheses of one source sentence."""

    def __init__(self, model: Seq2Seq, src: Sequence[int], latent: str,
                 rng: Optional[np.random.Generator] = None):
        self.model = model
        self.P = model.bind()
        self.prec = model.precision
        self.latent = latent
        self.rng = rng
        src = np.asarray([list(src)], dtype=np.int64)
        self.enc = encode_source(model, self.P, src, np.array([src.shape[1]]))
        self._tiled = {1: self.enc}

    def initial(self):
        state = initial_decoder_state(self.model, self.P, self.enc.final)
        z = None
        if self.model.kind != BASELINE:
            z = self._latent(prior_initial(self.model, self.P, self.enc.final)).value
        return _values(state), z

    def _latent(self, g):
        if self.latent == "mean":
            return g.mu
        eps = self.rng.standard_normal(g.mu.shape)
        return ad.add(g.mu, ad.mul(g.sigma, ad.const(eps, self.prec)))

    def step(self, states: List[Tuple[np.ndarray, np.ndarray]], zs, prev_tokens):
        """Advance k hypotheses in one batch; returns (log-probs [k, V], states, zs)."""
        k = len(states)
        hidden = ad.const(np.concatenate([s[0] for s in states]), self.prec)
        cell = ad.const(np.concatenate([s[1] for s in states]), self.prec)
        if k not in self._tiled:
            self._tiled[k] = _tile_encoding(self.enc, k)
        enc = self._tiled[k]
        z = None
        if self.model.kind != BASELINE:
            z = ad.const(np.concatenate(zs), self.prec)
            if self.model.kind == SDEC:
                z = self._latent(prior_step(self.model, self.P, hidden, z))
        emb = ad.embedding(self.P[self.model.tgt_emb], np.asarray(prev_tokens))
        new, logits = decoder_step(self.model, self.P, RnnState(hidden, cell), emb, z, enc)
        logp = ad.log_softmax(logits).value.astype(np.float64)
        h, c = new.hidden.value, new.cell.value
        new_states = [(h[i:i + 1], c[i:i + 1]) for i in range(k)]
        new_z = [None] * k if z is None else [z.value[i:i + 1] for i in range(k)]
        return logp, new_states, new_z


def _values(state: RnnState):
    return state.hidden.value, state.cell.value


def _tile_encoding(enc: SourceEncoding, k: int) -> SourceEncoding:
    tile = lambda e: ad.const(np.repeat(e.value, k, axis=0), e.value.dtype)  # noqa: E731
    return SourceEncoding(tile(enc.states), tile(enc.final), np.repeat(enc.mask, k, axis=0),
                          tile(enc.keys))


def _check_max_len(max_len):
    if max_len is not None and max_len <= 0:
        raise ValueError(f"max_len must be positive, got {max_len}")


def _greedy_rows(model: Seq2Seq, src, max_len, latent: str, rows: int = 1,
                 rng=None) -> Tuple[List[List[int]], np.ndarray]:
    """Argmax decoding of ``rows`` independent copies of one source.

    Copies differ only through their latent draws (``latent="sample"``).
    Returns per-row token lists (EOS kept when emitted) and scores.
    """
    stepper = _Stepper(model, src, latent, rng)
    states, zs = [], []
    for _ in range(rows):
        state, z = stepper.initial()
        states.append(state)
        zs.append(z)
    prev = [BOS] * rows
    tokens: List[List[int]] = [[] for _ in range(rows)]
    scores = np.zeros(rows)
    done = np.zeros(rows, dtype=bool)
    for _ in range(max_len):
        logp, new_states, new_zs = stepper.step(states, zs, prev)
        picks = np.argmax(logp, axis=1)  # first maximum: lowest id on ties
        for r in range(rows):
            if done[r]:
                continue
            tok = int(picks[r])
            scores[r] += float(logp[r, tok])
            tokens[r].append(tok)
            done[r] = tok == EOS
        states = new_states
        if model.kind == SDEC:
            zs = new_zs
        prev = [int(p) for p in picks]
        if done.all():
            break
    return tokens, scores


def _strip_eos(tokens: List[int]) -> List[int]:
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens


def greedy_decode(model: Seq2Seq, src: Sequence[int], max_len: Optional[int] = None) -> List[int]:
    """Argmax decoding with latents at their prior means; EOS is stripped."""
    _check_max_len(max_len)
    max_len = max_len or default_max_len(len(src))
    tokens, _ = _greedy_rows(model, src, max_len, "mean")
    return _strip_eos(tokens[0])


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: List[Hypothesis]

    @property
    def tokens(self) -> List[int]:
        return self.best.words()


def _rank_key(h: Hypothesis):
    return (-h.score, h.tokens)


def beam_decode(model: Seq2Seq, src: Sequence[int], beam_size: int = 5,
                max_len: Optional[int] = None) -> BeamResult:
    """Beam search over summed token log-probabilities, no length normalisation.

    Hypotheses that emit EOS retire to a finished pool; the search ends once
    no active hypothesis can still beat the best finished one.  Ties are
    broken by token-id order of the whole sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    _check_max_len(max_len)
    max_len = max_len or default_max_len(len(src))
    stepper = _Stepper(model, src, "mean")
    state, z = stepper.initial()
    active = [Hypothesis((), 0.0, state, z)]
    pool: List[Hypothesis] = []
    for _ in range(max_len):
        prev = [h.tokens[-1] if h.tokens else BOS for h in active]
        logp, states, zs = stepper.step([h.state for h in active], [h.z for h in active], prev)
        cands = []
        for k, h in enumerate(active):
            z_next = zs[k] if model.kind == SDEC else h.z
            for tok in range(logp.shape[1]):
                cands.append(Hypothesis(h.tokens + (tok,), h.score + float(logp[k, tok]),
                                        states[k], z_next))
        cands.sort(key=_rank_key)
        active = []
        for h in cands[:beam_size]:
            (pool if h.tokens[-1] == EOS else active).append(h)
        if not active:
            break
        if pool and max(p.score for p in pool) >= active[0].score:
            # scores only decrease, so no active hypothesis can overtake
            active = []
            break
    # hypotheses still active here were cut off by max_len
    pool.extend(active)
    pool.sort(key=_rank_key)
    for h in pool:
        h.state = None
    return BeamResult(pool[0], pool)


def sample_translations(model: Seq2Seq, src: Sequence[int], num_samples: int,
                        rng: np.random.Generator, max_len: Optional[int] = None
                        ) -> List[List[int]]:
    """Translations under latents sampled from the prior; words are argmax picks."""
    if model.kind == BASELINE:
        raise ValueError("sample_translations: BASELINE has no latent variables")
    _check_max_len(max_len)
    max_len = max_len or default_max_len(len(src))
    if num_samples < 1:
        raise ValueError("num_samples must be positive")
    tokens, _ = _greedy_rows(model, src, max_len, "sample", num_samples, rng)
    return [_strip_eos(t) for t in tokens]


def sequence_logprob(model: Seq2Seq, src: Sequence[int], tokens: Sequence[int]) -> float:
    """Teacher-forced log-probability of ``tokens`` (EOS included if present)
    under the mean-latent protocol."""
    tokens = list(tokens)
    tgt = np.asarray([[BOS, *tokens]], dtype=np.int64)
    batch = TokenBatch(np.asarray([list(src)], dtype=np.int64), tgt,
                       np.array([len(src)]), np.array([tgt.shape[1]]))
    latents = None if model.kind == BASELINE else LatentMode.PRIOR_MEAN
    logps, _ = teacher_forced(model, model.bind(), batch, latents)
    return float(np.sum([float(lp.value[0]) for lp in logps]))
