"""Finite-difference gradient checks over every layer type and both model families.

Each case builds a small f64 graph from a seed and returns it with the leaf
bindings to perturb.  :func:`run_suite` checks them all and renders a report
whose bytes depend only on the seed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .corpus import make_batch
from .inference import InferenceNetwork, kl_diag_gaussian, reparam_sample, sequence_elbo
from .layers import (Attention, BiEncoder, GaussianHead, GaussianParams, Linear, LSTMCell, ParamStore, RnnState,
                     dropout, run_lstm)
from .models import BASELINE, ModelConfig, Seq2Seq, teacher_forced

Case = Tuple[ad.Expr, Dict[str, np.ndarray]]

B, IN, U = 2, 3, 4


def _data(rng, *shape):
    return ad.const(rng.standard_normal(shape), "f64")


def _readout(x: ad.Expr, rng) -> ad.Expr:
    # a random linear functional keeps every output coordinate in play
    return ad.sum(ad.mul(x, ad.const(rng.standard_normal(x.shape), "f64")))


def _store_case(build: Callable[[ParamStore, np.random.Generator], ad.Expr], seed: int) -> Case:
    rng = np.random.default_rng(seed)
    store = ParamStore("f64")
    expr = build(store, rng)
    return expr, dict(store.arrays)


def _linear(store, rng):
    lin = Linear(store, "lin", IN, U, rng)
    return _readout(ad.tanh(lin(store.bind(), _data(rng, B, IN))), rng)


def _lstm_cell(store, rng):
    cell = LSTMCell(store, "cell", IN, U, rng)
    P = store.bind()
    state = RnnState(_data(rng, B, U), _data(rng, B, U))
    out = cell(P, _data(rng, B, IN), state)
    return _readout(out.hidden, rng) + _readout(out.cell, rng)


def _masked_lstm(store, rng):
    cell = LSTMCell(store, "rnn", IN, U, rng)
    P = store.bind()
    inputs = [_data(rng, B, IN) for _ in range(4)]
    outs, final = run_lstm(cell, P, inputs, np.array([4, 2]), precision="f64")
    return _readout(ad.stack(outs, axis=1), rng) + _readout(final.hidden, rng)


def _bi_encoder(store, rng):
    enc = BiEncoder(store, "bi", IN, U, rng)
    P = store.bind()
    states, final = enc(P, [_data(rng, B, IN) for _ in range(3)], np.array([3, 1]), "f64")
    return _readout(ad.stack(states, axis=1), rng) + _readout(final, rng)


def _attention(store, rng):
    att = Attention(store, "att", U, 2 * U, 3, rng)
    P = store.bind()
    enc_states = _data(rng, B, 5, 2 * U)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0]], dtype=bool)
    alphas, context = att(P, ad.tanh(_data(rng, B, U)), enc_states, mask)
    return _readout(context, rng) + _readout(alphas, rng)


def _gaussian_head(store, rng):
    head = GaussianHead(store, "head", IN + U, 2, rng)
    g = head(store.bind(), [_data(rng, B, IN), _data(rng, B, U)])
    return _readout(g.mu, rng) + _readout(ad.log(g.sigma), rng)


def _embedding_softmax(store, rng):
    store.add("emb", (6, IN), "normal", rng)
    store.add("proj", (IN, 6), "glorot", rng)
    P = store.bind()
    x = ad.embedding(P["emb"], np.array([1, 4, 4]))
    logits = ad.matmul(x, P["proj"])
    return _readout(ad.log_softmax(logits), rng) + _readout(ad.softmax(logits), rng)


def _dropout(store, rng):
    lin = Linear(store, "lin", IN, U, rng)
    h = dropout(lin(store.bind(), _data(rng, B, IN)), 0.5, rng, train_mode=True)
    return _readout(ad.sigmoid(h), rng)


def _gaussian_terms(store, rng):
    for name in ("mu_q", "s_q", "mu_p", "s_p"):
        store[store.add(name, (B, 3), "const", rng)] = rng.standard_normal((B, 3))
    P = store.bind()
    q = GaussianParams(P["mu_q"], ad.softplus(P["s_q"]))
    p = GaussianParams(P["mu_p"], ad.softplus(P["s_p"]))
    z = reparam_sample(q, rng.standard_normal((B, 3)))
    return ad.sum(kl_diag_gaussian(q, p)) + _readout(ad.exp(ad.mul(z, ad.const(0.3))), rng)


LAYER_CASES: Dict[str, Callable] = {
    "linear": _linear,
    "lstm_cell": _lstm_cell,
    "lstm_masked": _masked_lstm,
    "bi_encoder": _bi_encoder,
    "attention": _attention,
    "gaussian_head": _gaussian_head,
    "embedding_softmax": _embedding_softmax,
    "dropout": _dropout,
    "gaussian_kl_reparam": _gaussian_terms,
}


def tiny_model(kind: str, seed: int) -> Tuple[Seq2Seq, Optional[InferenceNetwork]]:
    config = ModelConfig(src_vocab=7, tgt_vocab=6, kind=kind, emb_dim=3, units=3, att_dim=2,
                         latent_dim=0 if kind == BASELINE else 2, precision="f64")
    rng = np.random.default_rng(seed)
    model = Seq2Seq(config, rng=rng)
    infnet = None if kind == BASELINE else InferenceNetwork(model, rng=rng)
    # zero-initialised biases would hide bias/weight mix-ups, so jitter everything
    for name in model.params.names():
        model.params[name] = model.params[name] + 0.1 * rng.standard_normal(
            model.params[name].shape)
    return model, infnet


def _tiny_batch(rng):
    pairs = [([4, 5, 6], [4, 5]), ([5, 4], [5, 4, 5])]
    return make_batch([([int(t) for t in rng.permutation(s)], t) for s, t in pairs])


def model_case(kind: str, seed: int, kl_weight: float = 0.37) -> Case:
    """Per-sentence NLL (BASELINE) or negative scaled ELBO with its noise recorded."""
    rng = np.random.default_rng(seed)
    model, infnet = tiny_model(kind, seed)
    batch = _tiny_batch(rng)
    P = model.bind()
    if kind == BASELINE:
        logps, _ = teacher_forced(model, P, batch)
        loss = ad.sum(ad.stack(logps, axis=1)) * (-1.0 / len(batch))
    else:
        rep = sequence_elbo(model, infnet, batch, rng, kl_weight, P=P)
        loss = rep.objective * (-1.0 / len(batch))
    return loss, dict(model.params.arrays)


MODEL_CASES = ("BASELINE", "SENT", "SDEC")


@dataclass
class SuiteResult:
    name: str
    seed: int
    max_rel_error: float
    worst_leaf: Optional[str]
    n_coords: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def build_case(name: str, seed: int) -> Case:
    if name in LAYER_CASES:
        return _store_case(LAYER_CASES[name], seed)
    if name in MODEL_CASES:
        return model_case(name, seed)
    raise KeyError(f"unknown gradient case {name!r}")


def all_case_names() -> List[str]:
    return list(LAYER_CASES) + list(MODEL_CASES)


def run_suite(seeds, names=None, eps: float = 1e-3, max_coords: Optional[int] = 4,
              stencil: int = 5) -> List[SuiteResult]:
    results = []
    for seed in seeds:
        for name in names or all_case_names():
            expr, bindings = build_case(name, seed)
            rep = ad.check_gradients(expr, bindings, eps=eps, max_coords=max_coords,
                                     rng=np.random.default_rng(seed), stencil=stencil)
            results.append(SuiteResult(name, seed, rep.max_rel_error, rep.worst_leaf,
                                       rep.n_coords))
    return results


def format_report(results: List[SuiteResult], tol: float) -> str:
    lines = ["case\tseed\tmax_rel_error\tworst_leaf\tcoords\tstatus"]
    for r in results:
        status = "ok" if r.passed(tol) else "FAIL"
        lines.append(f"{r.name}\t{r.seed}\t{r.max_rel_error:.3e}\t{r.worst_leaf}\t"
                     f"{r.n_coords}\t{status}")
    return "\n".join(lines) + "\n"
