"""Attentional encoder-decoder with optional latent variables.

Three kinds share the encoder, attention and output layers:

* ``BASELINE``: deterministic decoder.
* ``SENT``: one sentence-level latent ``z_0`` fed to the decoder at every step.
* ``SDEC``: a latent chain ``z_0 .. z_n``; ``z_0`` only seeds the chain and
  ``z_i`` (i >= 1) enters the decoder update at position i.

The decoder's recurrent hidden state is the post-attention vector ``t_i``;
the LSTM cell state is carried alongside it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Expr
from .corpus import BOS, EOS, PAD, TokenBatch
from .layers import (Attention, BiEncoder, GaussianHead, GaussianParams, Linear, LSTMCell,
                     ParamStore, RnnState, dropout, encode_bidirectional)

BASELINE, SENT, SDEC = "BASELINE", "SENT", "SDEC"
KINDS = (BASELINE, SENT, SDEC)


class LatentMode(str, Enum):
    PRIOR_SAMPLE = "PRIOR_SAMPLE"
    POSTERIOR_SAMPLE = "POSTERIOR_SAMPLE"
    PRIOR_MEAN = "PRIOR_MEAN"


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    kind: str = SDEC
    emb_dim: int = 32
    units: int = 64
    att_dim: int = 32
    latent_dim: Optional[int] = None
    retain: float = 1.0
    precision: str = "f32"

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.latent_dim is None:
            self.latent_dim = 0 if self.kind == BASELINE else 16
        if self.kind == BASELINE and self.latent_dim != 0:
            raise ValueError("BASELINE takes no latent variable (latent_dim must be 0)")
        if self.kind != BASELINE and self.latent_dim <= 0:
            raise ValueError(f"{self.kind} needs latent_dim > 0")
        if not 0.0 < self.retain <= 1.0:
            raise ValueError(f"retain must lie in (0, 1], got {self.retain}")
        for name in ("src_vocab", "tgt_vocab"):
            if getattr(self, name) < 5:
                raise ValueError(f"{name} must be at least 5 (4 reserved ids)")
        for name in ("emb_dim", "units", "att_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        ad.as_dtype(self.precision)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            kw[key] = _coerce(key, raw.strip())
        return cls(**kw)


def _coerce(key: str, raw: str):
    if key in ("kind", "precision"):
        return raw
    if key == "retain":
        return float(raw)
    if key == "latent_dim" and raw == "None":
        return None
    return int(raw)


@dataclass
class LatentChain:
    """Latent values z_0..z_n plus the Gaussian each was drawn from."""
    z: List[np.ndarray]
    mode: LatentMode
    mu: List[np.ndarray] = field(default_factory=list)
    sigma: List[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.z)


@dataclass
class SourceEncoding:
    states: Expr          # [B, S, 2U]
    final: Expr           # h_m, [B, 2U]
    mask: np.ndarray      # [B, S] bool
    keys: Expr            # attention key projection, [B, S, A]


class Seq2Seq:
    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None,
                 seed: int = 0):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.config = c = config
        self.params = store = ParamStore(c.precision)
        E, U, A, L = c.emb_dim, c.units, c.att_dim, c.latent_dim
        self.src_emb = store.add("gen.src_emb", (c.src_vocab, E), "glorot", rng)
        self.tgt_emb = store.add("gen.tgt_emb", (c.tgt_vocab, E), "glorot", rng)
        self.encoder = BiEncoder(store, "gen.encoder", E, U, rng)
        self.bridge = Linear(store, "gen.bridge", 2 * U, U, rng)
        dec_in = E + (L if c.kind != BASELINE else 0)
        self.decoder = LSTMCell(store, "gen.decoder", dec_in, U, rng)
        self.attention = Attention(store, "gen.attention", U, 2 * U, A, rng)
        self.combine = Linear(store, "gen.combine", 3 * U, U, rng)
        self.output = Linear(store, "gen.output", U, c.tgt_vocab, rng)
        self.prior0 = GaussianHead(store, "gen.prior0", 2 * U, L, rng) if c.kind != BASELINE else None
        self.prior = GaussianHead(store, "gen.prior", U + L, L, rng) if c.kind == SDEC else None

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def precision(self) -> str:
        return self.config.precision

    def bind(self) -> Dict[str, Expr]:
        return self.params.bind()


# ---------------------------------------------------------------------------


def embed_positions(table: Expr, ids: np.ndarray) -> List[Expr]:
    """Per-position [B, E] embeddings of a [B, T] id matrix."""
    return [ad.embedding(table, ids[:, t]) for t in range(ids.shape[1])]


def encode_source(model: Seq2Seq, P, src: np.ndarray, src_lengths, train: bool = False,
                  rng: Optional[np.random.Generator] = None) -> SourceEncoding:
    src = np.asarray(src)
    lengths = np.asarray(src_lengths)
    if src.ndim != 2 or src.shape[1] == 0 or lengths.min() < 1:
        raise ValueError("encode_source: empty source sentence")
    emb = embed_positions(P[model.src_emb], src)
    emb = [dropout(e, model.config.retain, rng, train) for e in emb]
    states, final = encode_bidirectional(model.encoder, P, emb, lengths, model.precision)
    mask = np.arange(src.shape[1])[None, :] < lengths[:, None]
    keys = model.attention.precompute(P, states)
    return SourceEncoding(states, final, mask, keys)


def prior_initial(model: Seq2Seq, P, h_m: Expr) -> GaussianParams:
    if model.kind == BASELINE:
        raise ValueError("prior_initial: BASELINE has no latent variable")
    return model.prior0(P, [h_m])


def prior_step(model: Seq2Seq, P, t_prev: Expr, z_prev: Expr) -> GaussianParams:
    if model.kind != SDEC:
        raise ValueError(f"prior_step: only SDEC has per-position latents, not {model.kind}")
    return model.prior(P, [t_prev, z_prev])


def initial_decoder_state(model: Seq2Seq, P, h_m: Expr) -> RnnState:
    hidden = ad.tanh(model.bridge(P, h_m))
    return RnnState(hidden, ad.const(np.zeros(hidden.shape), model.precision))


def decoder_step(model: Seq2Seq, P, state: RnnState, y_prev_emb: Expr, z: Optional[Expr],
                 enc: SourceEncoding, train: bool = False,
                 rng: Optional[np.random.Generator] = None):
    """One decoder update; returns (new state, logits).

    ``z`` is the current latent for SDEC, the sentence latent for SENT, and
    must be None for BASELINE.
    """
    if (z is None) != (model.kind == BASELINE):
        raise ValueError(f"decoder_step: latent arity does not match kind {model.kind}")
    x = dropout(y_prev_emb, model.config.retain, rng, train)
    if z is not None:
        x = ad.concat([x, z])
    tilde = model.decoder(P, x, state)
    _, context = model.attention(P, tilde.hidden, enc.states, enc.mask, keys=enc.keys)
    t = model.combine(P, ad.concat([tilde.hidden, context]))
    feats = dropout(t, model.config.retain, rng, train)
    logits = model.output(P, feats)
    return RnnState(t, tilde.cell), logits


def gold_logprob(logits: Expr, gold: np.ndarray, mask: np.ndarray) -> Expr:
    """Masked log p(gold) per row, [B]; padded rows contribute exactly 0."""
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(gold)), gold] = 1.0
    onehot *= np.asarray(mask, dtype=float)[:, None]
    return ad.sum(ad.mul(ad.log_softmax(logits), ad.const(onehot, logits.dtype)), axis=-1)


def target_masks(batch: TokenBatch) -> np.ndarray:
    """[B, n] mask of predicted positions (everything after BOS up to EOS)."""
    n = batch.tgt.shape[1] - 1
    return np.arange(n)[None, :] < (batch.tgt_len - 1)[:, None]


def teacher_forced(model: Seq2Seq, P, batch: TokenBatch,
                   latents: Optional[LatentChain | LatentMode] = None,
                   train: bool = False, rng: Optional[np.random.Generator] = None):
    """Teacher-forced pass.  Returns (list of [B] log-prob Exprs, chain).

    ``latents`` is a recorded :class:`LatentChain` to replay, or
    ``LatentMode.PRIOR_MEAN`` to unroll the prior means along the gold
    prefix.  BASELINE takes none.
    """
    kind = model.kind
    if kind == BASELINE and latents is not None:
        raise ValueError("teacher_forced: BASELINE takes no latents")
    if kind != BASELINE and latents is None:
        raise ValueError(f"teacher_forced: {kind} needs a LatentChain or PRIOR_MEAN")
    n = batch.tgt.shape[1] - 1
    replay = isinstance(latents, LatentChain)
    if replay:
        want = 1 if kind == SENT else n + 1
        if len(latents) != want:
            raise ValueError(f"teacher_forced: chain length {len(latents)} != {want}")
    elif latents is not None and latents != LatentMode.PRIOR_MEAN:
        raise ValueError(f"teacher_forced: unsupported latent mode {latents}")

    enc = encode_source(model, P, batch.src, batch.src_len, train, rng)
    state = initial_decoder_state(model, P, enc.final)
    emb = embed_positions(P[model.tgt_emb], batch.tgt)
    mask = target_masks(batch)
    chain = LatentChain([], LatentMode.POSTERIOR_SAMPLE if replay else LatentMode.PRIOR_MEAN)

    def const(a):
        return ad.const(a, model.precision)

    z = None
    if kind != BASELINE:
        if replay:
            z = const(latents.z[0])
        else:
            z = prior_initial(model, P, enc.final).mu
        chain.z.append(z.value)
    out = []
    for i in range(1, n + 1):
        if kind == SDEC:
            if replay:
                z = const(latents.z[i])
            else:
                z = prior_step(model, P, state.hidden, z).mu
            chain.z.append(z.value)
        state, logits = decoder_step(model, P, state, emb[i - 1], z, enc, train, rng)
        out.append(gold_logprob(logits, batch.tgt[:, i], mask[:, i - 1]))
    if replay:
        chain.mode = latents.mode
    return out, chain


def teacher_forced_nll(model: Seq2Seq, batch: TokenBatch,
                       latents: Optional[LatentChain | LatentMode] = None) -> np.ndarray:
    """Per-position log p(y_i | ...) of the gold tokens, [B, n]; padding is 0."""
    P = model.bind()
    logps, _ = teacher_forced(model, P, batch, latents)
    return np.stack([lp.value for lp in logps], axis=1)
