"""Inference network, reparametrised sampling, KL terms and the ELBO.

The inference network reads the target sentence (a bidirectional encoding
for ``z_0``, a right-to-left encoding for ``z_i``) on top of features
computed by the generator.  Every generator feature it consumes passes
through ``stop_gradient``, so posterior-side losses never update generator
weights through those features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Expr
from .corpus import TokenBatch, make_batch
from .layers import BiEncoder, GaussianHead, GaussianParams, LSTMCell, run_lstm
from .models import (BASELINE, SDEC, SENT, LatentChain, LatentMode, Seq2Seq, decoder_step,
                     embed_positions, encode_source, gold_logprob, initial_decoder_state,
                     prior_initial, prior_step, target_masks)


class InferenceNetwork:
    """Posterior networks; parameters live in the model's store under ``inf.``."""

    def __init__(self, model: Seq2Seq, rng: Optional[np.random.Generator] = None,
                 seed: int = 1):
        if model.kind == BASELINE:
            raise ValueError("BASELINE has no inference network")
        rng = rng if rng is not None else np.random.default_rng(seed)
        c = model.config
        E, U, L = c.emb_dim, c.units, c.latent_dim
        store = model.params
        self.model = model
        self.target_bi = BiEncoder(store, "inf.target_bi", E, U, rng)
        self.q0 = GaussianHead(store, "inf.q0", 4 * U, L, rng)
        if model.kind == SDEC:
            self.target_rev = LSTMCell(store, "inf.target_rev", E, U, rng)
            self.q = GaussianHead(store, "inf.q", U + L + U + E, L, rng)
        else:
            self.target_rev = self.q = None

    @property
    def kind(self) -> str:
        return self.model.kind


def attach_inference_network(model: Seq2Seq, seed: int = 1) -> Optional[InferenceNetwork]:
    return None if model.kind == BASELINE else InferenceNetwork(model, seed=seed)


# ---------------------------------------------------------------------------
# Gaussian pieces


def reparam_sample(params: GaussianParams, eps) -> Expr:
    """z = mu + sigma * eps."""
    eps = np.asarray(eps)
    if params.mu.shape is not None and tuple(eps.shape) != tuple(params.mu.shape):
        raise ad.ShapeError(f"reparam_sample: eps shape {eps.shape} != mu shape {params.mu.shape}")
    return ad.add(params.mu, ad.mul(params.sigma, ad.const(eps, params.mu.dtype)))


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Expr:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    for name, g in (("q", q), ("p", p)):
        if g.sigma.value is not None and not np.all(g.sigma.value > 0):
            raise ValueError(f"kl_diag_gaussian: nonpositive sigma in {name}")
    if q.mu.shape != p.mu.shape or q.sigma.shape != p.sigma.shape:
        raise ad.ShapeError(f"kl_diag_gaussian: shapes {q.mu.shape} vs {p.mu.shape}")
    var_q = ad.mul(q.sigma, q.sigma)
    var_p = ad.mul(p.sigma, p.sigma)
    diff = ad.sub(q.mu, p.mu)
    terms = ad.add(
        ad.sub(ad.log(p.sigma), ad.log(q.sigma)),
        ad.div(ad.add(var_q, ad.mul(diff, diff)), var_p * 2.0),
    )
    return ad.sum(terms, axis=-1) - 0.5 * q.mu.shape[-1]


def gaussian_params(mu, sigma, precision="f64") -> GaussianParams:
    """Wrap plain arrays as constant Gaussian parameters."""
    return GaussianParams(ad.const(mu, precision), ad.const(sigma, precision))


def q_initial(infnet: InferenceNetwork, P, h_m: Expr, b_n: Expr) -> GaussianParams:
    return infnet.q0(P, [ad.stop_gradient(h_m), b_n])


def q_step(infnet: InferenceNetwork, P, t_prev: Expr, z_prev: Expr, r_i: Expr,
           y_emb: Expr) -> GaussianParams:
    """Posterior for z_i.  ``t_prev`` and ``y_emb`` come from the generator."""
    if infnet.q is None:
        raise ValueError(f"q_step: only SDEC has per-position posteriors, not {infnet.kind}")
    return infnet.q(P, [ad.stop_gradient(t_prev), z_prev, r_i, ad.stop_gradient(y_emb)])


def kl_scale(t: int, anneal_steps: int = 20000) -> float:
    """Linear KL weight min(t / anneal_steps, 1)."""
    if anneal_steps <= 0:
        raise ValueError("anneal_steps must be positive")
    return min(t / anneal_steps, 1.0)


# ---------------------------------------------------------------------------
# ELBO


@dataclass
class ElboReport:
    recon: np.ndarray           # [n] log p(y_i | .) summed over the batch
    kl: np.ndarray              # [n + 1] KL_i summed over the batch, index 0 is z_0
    kl_scale: float
    scaled_elbo: float
    unscaled_elbo: float
    n_sentences: int
    n_tokens: int
    objective: Optional[Expr] = field(default=None, repr=False)
    chain: Optional[LatentChain] = field(default=None, repr=False)
    eps: List[np.ndarray] = field(default_factory=list, repr=False)
    kl_per_sentence: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def recon_total(self) -> float:
        return float(self.recon.sum())

    @property
    def kl_total(self) -> float:
        return float(self.kl.sum())

    @property
    def per_token_rate(self) -> float:
        return self.kl_total / max(self.n_tokens, 1)

    CSV_HEADER = "step,kl_scale,recon_total,kl_total,scaled_elbo,unscaled_elbo,per_token_rate"

    def to_csv_row(self, step: int) -> str:
        vals = [self.kl_scale, self.recon_total, self.kl_total, self.scaled_elbo,
                self.unscaled_elbo, self.per_token_rate]
        return ",".join([str(int(step))] + [repr(float(v)) for v in vals])


def target_encodings(infnet: InferenceNetwork, P, batch: TokenBatch, tgt_emb: List[Expr]):
    """(b_n, [r_1 .. r_n]) over y_1..y_n (BOS excluded), embeddings blocked."""
    words = [ad.stop_gradient(e) for e in tgt_emb[1:]]
    lengths = batch.tgt_len - 1
    prec = infnet.model.precision
    _, b_n = infnet.target_bi(P, words, lengths, prec)
    r = None
    if infnet.target_rev is not None:
        r, _ = run_lstm(infnet.target_rev, P, words, lengths, reverse=True, precision=prec)
    return b_n, r


def sequence_elbo(model: Seq2Seq, infnet: InferenceNetwork, batch: TokenBatch,
                  rng: Optional[np.random.Generator], kl_weight: float = 1.0, P=None,
                  eps: Optional[Sequence[np.ndarray]] = None, train: bool = False,
                  dropout_rng: Optional[np.random.Generator] = None) -> ElboReport:
    """Single-sample estimate of the nested ELBO for a batch.

    Latents are drawn from the posterior (z_0 from ``q_initial``, z_i from
    ``q_step``); the priors are evaluated on that same posterior chain.  Pass
    ``eps`` (one [B, latent_dim] array per latent) to replay a recorded noise
    stream instead of drawing from ``rng``.
    """
    kind = model.kind
    if kind == BASELINE:
        raise ValueError("sequence_elbo: BASELINE has no latent variables")
    if eps is None and rng is None:
        raise ValueError("sequence_elbo: an rng or a recorded eps stream is required")
    P = P if P is not None else model.bind()
    B = len(batch)
    L = model.config.latent_dim
    n = batch.tgt.shape[1] - 1
    mask = target_masks(batch)
    n_latents = 1 if kind == SENT else n + 1
    if eps is not None and len(eps) != n_latents:
        raise ValueError(f"sequence_elbo: need {n_latents} eps arrays, got {len(eps)}")
    used_eps: List[np.ndarray] = []

    def draw(k):
        e = np.asarray(eps[k]) if eps is not None else rng.standard_normal((B, L))
        used_eps.append(e)
        return e

    prec = model.precision
    enc = encode_source(model, P, batch.src, batch.src_len, train, dropout_rng)
    tgt_emb = embed_positions(P[model.tgt_emb], batch.tgt)
    b_n, r = target_encodings(infnet, P, batch, tgt_emb)

    chain = LatentChain([], LatentMode.POSTERIOR_SAMPLE)
    p0 = prior_initial(model, P, enc.final)
    q0 = q_initial(infnet, P, enc.final, b_n)
    z = reparam_sample(q0, draw(0))
    _record(chain, z, q0)
    kls = [kl_diag_gaussian(q0, p0)]
    recons = []
    state = initial_decoder_state(model, P, enc.final)
    for i in range(1, n + 1):
        if kind == SDEC:
            p_i = prior_step(model, P, state.hidden, z)
            q_i = q_step(infnet, P, state.hidden, z, r[i - 1], tgt_emb[i])
            z = reparam_sample(q_i, draw(i))
            _record(chain, z, q_i)
            m = ad.const(mask[:, i - 1].astype(float), prec)
            kls.append(ad.mul(kl_diag_gaussian(q_i, p_i), m))
        state, logits = decoder_step(model, P, state, tgt_emb[i - 1], z, enc, train, dropout_rng)
        recons.append(gold_logprob(logits, batch.tgt[:, i], mask[:, i - 1]))

    recon_sum = ad.sum(ad.stack(recons, axis=1))
    kl_per_sentence = ad.sum(ad.stack(kls, axis=1), axis=1)
    kl_sum = ad.sum(kl_per_sentence)
    objective = recon_sum - kl_sum * float(kl_weight) if kl_weight else recon_sum
    recon_vals = np.array([float(x.value.sum()) for x in recons])
    kl_vals = np.array([float(x.value.sum()) for x in kls])
    if kind == SENT:
        kl_vals = np.concatenate([kl_vals, np.zeros(n)])
    return ElboReport(
        recon=recon_vals,
        kl=kl_vals,
        kl_scale=float(kl_weight),
        scaled_elbo=float(objective.value),
        unscaled_elbo=float(recon_sum.value) - float(kl_sum.value),
        n_sentences=B,
        n_tokens=int(mask.sum()),
        objective=objective,
        chain=chain,
        eps=used_eps,
        kl_per_sentence=np.asarray(kl_per_sentence.value, dtype=np.float64),
    )


def _record(chain: LatentChain, z: Expr, g: GaussianParams):
    chain.z.append(z.value)
    chain.mu.append(g.mu.value)
    chain.sigma.append(g.sigma.value)


@dataclass
class RateReport:
    rate: float            # mean KL per sentence (nats)
    per_token_rate: float
    n_sentences: int
    n_tokens: int


def rate_diagnostic(model: Seq2Seq, infnet: InferenceNetwork, pairs, batch_size: int = 32,
                    seed: int = 0) -> RateReport:
    """Average total KL per sentence: a variational upper bound on I(Z; Y).

    ``pairs`` are encoded (source ids, target ids) pairs.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("rate_diagnostic: empty dataset")
    rng = np.random.default_rng(seed)
    total_kl = 0.0
    tokens = 0
    for start in range(0, len(pairs), batch_size):
        batch = make_batch(pairs[start:start + batch_size])
        rep = sequence_elbo(model, infnet, batch, rng, kl_weight=1.0)
        total_kl += rep.kl_total
        tokens += rep.n_tokens
    return RateReport(total_kl / len(pairs), total_kl / max(tokens, 1), len(pairs), tokens)


# ---------------------------------------------------------------------------
# densities for importance-sampling checks


def log_normal(z: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """log N(z; mu, diag sigma^2) summed over the last axis."""
    z, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (z, mu, sigma))
    return (-0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * math.log(2 * math.pi)).sum(-1)


def sample_log_weights(model: Seq2Seq, infnet: InferenceNetwork, batch: TokenBatch,
                       rng: np.random.Generator) -> np.ndarray:
    """log p(y, z) - log q(z | y) per sentence for one posterior draw of z.

    Uses explicit Gaussian densities rather than the analytic KL, so averaging
    ``exp`` of these weights gives an independent estimate of p(y | x).
    """
    P = model.bind()
    rep = sequence_elbo(model, infnet, batch, rng, kl_weight=1.0, P=P)
    chain = rep.chain
    mask = target_masks(batch)
    # rerun the generator on the recorded chain to recover prior parameters
    enc = encode_source(model, P, batch.src, batch.src_len)
    tgt_emb = embed_positions(P[model.tgt_emb], batch.tgt)
    p0 = prior_initial(model, P, enc.final)
    log_q = log_normal(chain.z[0], chain.mu[0], chain.sigma[0])
    log_p = log_normal(chain.z[0], p0.mu.value, p0.sigma.value)
    state = initial_decoder_state(model, P, enc.final)
    z = ad.const(chain.z[0], model.precision)
    log_lik = np.zeros(len(batch))
    for i in range(1, batch.tgt.shape[1]):
        m = mask[:, i - 1]
        if model.kind == SDEC:
            p_i = prior_step(model, P, state.hidden, z)
            z = ad.const(chain.z[i], model.precision)
            log_q = log_q + m * log_normal(chain.z[i], chain.mu[i], chain.sigma[i])
            log_p = log_p + m * log_normal(chain.z[i], p_i.mu.value, p_i.sigma.value)
        state, logits = decoder_step(model, P, state, tgt_emb[i - 1], z, enc)
        log_lik = log_lik + gold_logprob(logits, batch.tgt[:, i], m).value
    return log_lik + log_p - log_q
