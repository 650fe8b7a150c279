import math

import numpy as np
import pytest

from stochdec import autodiff as ad
from stochdec.corpus import BOS, EOS, PAD, generate_copy_corpus, build_vocab, encode_corpus, make_batch
from stochdec.inference import InferenceNetwork, sequence_elbo
from stochdec.models import (BASELINE, SDEC, SENT, LatentChain, LatentMode, ModelConfig, Seq2Seq,
                             decoder_step, embed_positions, encode_source, initial_decoder_state,
                             prior_initial, prior_step, teacher_forced, teacher_forced_nll)
from stochdec.training import TrainConfig, train


def make_model(kind, seed=0, precision="f64", **kw):
    cfg = dict(src_vocab=9, tgt_vocab=8, kind=kind, emb_dim=4, units=5, att_dim=3,
               precision=precision)
    cfg.update(kw)
    if kind != BASELINE:
        cfg.setdefault("latent_dim", 2)
    return Seq2Seq(ModelConfig(**cfg), seed=seed)


def zero_head(model, head):
    for name in head.param_names():
        model.params[name] = np.zeros_like(model.params[name])


BATCH = make_batch([([4, 5, 6], [4, 5]), ([7, 4], [6, 6, 7])])


# --- config ------------------------------------------------------------------

def test_latent_dim_iff_latent_kind():
    with pytest.raises(ValueError):
        ModelConfig(9, 9, kind=BASELINE, latent_dim=4)
    with pytest.raises(ValueError):
        ModelConfig(9, 9, kind=SDEC, latent_dim=0)
    assert ModelConfig(9, 9, kind=BASELINE).latent_dim == 0
    assert ModelConfig(9, 9, kind=SENT).latent_dim == 16


def test_config_text_roundtrip():
    cfg = ModelConfig(11, 13, kind=SENT, emb_dim=7, latent_dim=3, retain=0.5, precision="f64")
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_text(cfg.to_text() + "colour=blue\n")


def test_desk_scale_defaults():
    cfg = ModelConfig(9, 9)
    assert (cfg.emb_dim, cfg.units, cfg.att_dim, cfg.latent_dim) == (32, 64, 32, 16)


# --- encoder -----------------------------------------------------------------

def test_single_token_source_shape():
    model = make_model(BASELINE)
    enc = encode_source(model, model.bind(), np.array([[4], [5]]), np.array([1, 1]))
    assert enc.states.shape == (2, 1, 10)
    assert enc.final.shape == (2, 10)


def test_source_token_reaches_every_position():
    model = make_model(BASELINE)
    P = model.bind()
    src = np.array([[4, 5, 6, 7]])
    base = encode_source(model, P, src, np.array([4])).states.value
    for j in range(4):
        bumped = src.copy()
        bumped[0, j] = 8
        new = encode_source(model, P, bumped, np.array([4])).states.value
        assert all(not np.allclose(new[0, k], base[0, k]) for k in range(4))


def test_empty_source_rejected():
    model = make_model(BASELINE)
    with pytest.raises(ValueError):
        encode_source(model, model.bind(), np.zeros((1, 0), dtype=int), np.array([0]))


# --- priors --------------------------------------------------------------------

def test_prior_initial_zero_heads_and_determinism():
    model = make_model(SDEC)
    zero_head(model, model.prior0)
    P = model.bind()
    h = ad.const(np.random.default_rng(0).standard_normal((2, 10)), "f64")
    g1, g2 = prior_initial(model, P, h), prior_initial(model, P, h)
    np.testing.assert_array_equal(g1.mu.value, 0.0)
    np.testing.assert_allclose(g1.sigma.value, math.log(2) + 1e-6)
    np.testing.assert_array_equal(g1.sigma.value, g2.sigma.value)


def test_prior_initial_rejects_baseline():
    model = make_model(BASELINE)
    with pytest.raises(ValueError):
        prior_initial(model, model.bind(), ad.const(np.zeros((1, 10)), "f64"))


def test_prior_step_kind_and_zero_heads():
    for kind in (BASELINE, SENT):
        model = make_model(kind)
        with pytest.raises(ValueError):
            prior_step(model, model.bind(), ad.const(np.zeros((1, 5)), "f64"),
                       ad.const(np.zeros((1, 2)), "f64"))
    model = make_model(SDEC)
    zero_head(model, model.prior)
    rng = np.random.default_rng(1)
    g = prior_step(model, model.bind(), ad.const(rng.standard_normal((3, 5)), "f64"),
                   ad.const(rng.standard_normal((3, 2)), "f64"))
    np.testing.assert_array_equal(g.mu.value, 0.0)
    np.testing.assert_allclose(g.sigma.value, math.log(2) + 1e-6)


def test_prior_step_mean_depends_on_previous_latent():
    model = make_model(SDEC)
    P = model.bind()
    rng = np.random.default_rng(2)
    zv = rng.standard_normal((1, 2))
    z = ad.leaf("z_prev", zv)
    g = prior_step(model, P, ad.const(rng.standard_normal((1, 5)), "f64"), z)
    grads = ad.gradient(ad.sum(g.mu), {**model.params.arrays, "z_prev": zv}, ["z_prev"])
    assert np.abs(grads["z_prev"]).max() > 1e-6


# --- decoder step ------------------------------------------------------------

def _step(model, z):
    P = model.bind()
    enc = encode_source(model, P, BATCH.src, BATCH.src_len)
    state = initial_decoder_state(model, P, enc.final)
    emb = embed_positions(P[model.tgt_emb], BATCH.tgt)
    return decoder_step(model, P, state, emb[0], z, enc)


def test_baseline_takes_no_latent():
    model = make_model(BASELINE)
    with pytest.raises(ValueError):
        _step(model, ad.const(np.zeros((2, 2)), "f64"))
    _, logits = _step(model, None)
    p = ad.softmax(logits).value
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_sdec_latent_changes_logits():
    model = make_model(SDEC)
    with pytest.raises(ValueError):
        _step(model, None)
    _, a = _step(model, ad.const(np.zeros((2, 2)), "f64"))
    _, b = _step(model, ad.const(np.ones((2, 2)), "f64"))
    assert not np.allclose(a.value, b.value)


def test_decoder_state_is_post_attention_vector():
    model = make_model(BASELINE)
    state, logits = _step(model, None)
    np.testing.assert_allclose(logits.value,
                               state.hidden.value @ model.params["gen.output.W"]
                               + model.params["gen.output.b"])


# --- teacher forcing ---------------------------------------------------------

def test_uniform_output_layer():
    model = make_model(BASELINE)
    model.params["gen.output.W"] = np.zeros_like(model.params["gen.output.W"])
    model.params["gen.output.b"] = np.zeros_like(model.params["gen.output.b"])
    lp = teacher_forced_nll(model, BATCH)
    mask = np.arange(lp.shape[1])[None, :] < (BATCH.tgt_len - 1)[:, None]
    np.testing.assert_allclose(lp[mask], -math.log(8))
    np.testing.assert_array_equal(lp[~mask], 0.0)


@pytest.mark.parametrize("kind", [BASELINE, SENT, SDEC])
def test_trailing_padding_changes_nothing(kind):
    model = make_model(kind)
    latents = None if kind == BASELINE else LatentMode.PRIOR_MEAN
    base = teacher_forced_nll(model, BATCH, latents)
    padded = make_batch([([4, 5, 6], [4, 5]), ([7, 4], [6, 6, 7])])
    padded.src = np.concatenate([padded.src, np.full((2, 2), PAD)], axis=1)
    padded.tgt = np.concatenate([padded.tgt, np.full((2, 3), PAD)], axis=1)
    longer = teacher_forced_nll(model, padded, latents)
    np.testing.assert_allclose(longer.sum(axis=1), base.sum(axis=1), atol=1e-12)
    np.testing.assert_array_equal(longer[:, base.shape[1]:], 0.0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _lstm(W, b, x, h, c):
    U = len(h)
    pre = np.concatenate([x, h]) @ W + b
    i, f, o, g = (_sigmoid(pre[:U]), _sigmoid(pre[U:2 * U]), _sigmoid(pre[2 * U:3 * U]),
                  np.tanh(pre[3 * U:]))
    c = f * c + i * g
    return o * np.tanh(c), c


def reference_logprob(params, src, tgt):
    """Independent single-sentence forward pass of the attentional baseline."""
    p = params
    U = p["gen.bridge.b"].shape[0]
    xs = [p["gen.src_emb"][t] for t in src]
    h, c = np.zeros(U), np.zeros(U)
    fw = []
    for x in xs:
        h, c = _lstm(p["gen.encoder.fw.W"], p["gen.encoder.fw.b"], x, h, c)
        fw.append(h)
    h, c = np.zeros(U), np.zeros(U)
    bw = [None] * len(xs)
    for j in reversed(range(len(xs))):
        h, c = _lstm(p["gen.encoder.bw.W"], p["gen.encoder.bw.b"], xs[j], h, c)
        bw[j] = h
    H = np.stack([np.concatenate([f, b]) for f, b in zip(fw, bw)])
    h_m = np.concatenate([fw[-1], bw[0]])
    t = np.tanh(h_m @ p["gen.bridge.W"] + p["gen.bridge.b"])
    cell = np.zeros(U)
    total = 0.0
    seq = [BOS] + list(tgt) + [EOS]
    for i in range(1, len(seq)):
        y_prev = p["gen.tgt_emb"][seq[i - 1]]
        tilde, cell = _lstm(p["gen.decoder.W"], p["gen.decoder.b"], y_prev, t, cell)
        scores = np.array([p["gen.attention.v"] @ np.tanh(
            tilde @ p["gen.attention.W_query"] + hj @ p["gen.attention.W_key"]
            + p["gen.attention.b"]) for hj in H])
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        ctx = alpha @ H
        t = np.concatenate([tilde, ctx]) @ p["gen.combine.W"] + p["gen.combine.b"]
        logits = t @ p["gen.output.W"] + p["gen.output.b"]
        logz = logits.max() + math.log(np.exp(logits - logits.max()).sum())
        total += logits[seq[i]] - logz
    return total


def test_tiny_model_matches_reference_forward():
    model = Seq2Seq(ModelConfig(src_vocab=7, tgt_vocab=7, kind=BASELINE, emb_dim=2, units=3,
                                att_dim=2, precision="f64"), seed=3)
    rng = np.random.default_rng(0)
    for name in model.params.names():
        model.params[name] = model.params[name] + 0.2 * rng.standard_normal(model.params[name].shape)
    for src, tgt in [([4, 5], [6, 4]), ([6], [5]), ([4, 4, 5], [5, 6])]:
        got = teacher_forced_nll(model, make_batch([(src, tgt)])).sum()
        assert got == pytest.approx(reference_logprob(model.params.arrays, src, tgt), abs=1e-10)


def test_latent_arity_checked():
    model = make_model(SDEC)
    with pytest.raises(ValueError):
        teacher_forced_nll(model, BATCH)
    bad = LatentChain([np.zeros((2, 2))] * 2, LatentMode.POSTERIOR_SAMPLE)
    with pytest.raises(ValueError):
        teacher_forced_nll(model, BATCH, bad)
    with pytest.raises(ValueError):
        teacher_forced_nll(make_model(BASELINE), BATCH, LatentMode.PRIOR_MEAN)


@pytest.mark.parametrize("kind", [SENT, SDEC])
def test_replaying_a_chain_is_bit_identical(kind):
    model = make_model(kind, precision="f32")
    infnet = InferenceNetwork(model, seed=4)
    rep = sequence_elbo(model, infnet, BATCH, np.random.default_rng(0))
    a = teacher_forced_nll(model, BATCH, rep.chain)
    b = teacher_forced_nll(model, BATCH, rep.chain)
    assert a.tobytes() == b.tobytes()
    # and it reproduces the reconstruction term of the ELBO exactly
    assert a.sum(axis=0).astype(np.float64) == pytest.approx(rep.recon, abs=1e-5)


def test_sdec_with_floor_sigma_ignores_noise():
    model = make_model(SDEC)
    for head in (model.prior0, model.prior):
        zero_head(model, head)
        out_b = head.sigma_out.b
        model.params[out_b] = np.full_like(model.params[out_b], -800.0)
    P = model.bind()
    enc = encode_source(model, P, BATCH.src, BATCH.src_len)
    runs = []
    for seed in (0, 1):
        rng = np.random.default_rng(seed)
        g = prior_initial(model, P, enc.final)
        assert np.all(g.sigma.value == 1e-6)
        z = g.mu + g.sigma * ad.const(rng.standard_normal(g.mu.shape), "f64")
        state = initial_decoder_state(model, P, enc.final)
        emb = embed_positions(P[model.tgt_emb], BATCH.tgt)
        logits = []
        for i in range(1, BATCH.tgt.shape[1]):
            g = prior_step(model, P, state.hidden, z)
            z = g.mu + g.sigma * ad.const(rng.standard_normal(g.mu.shape), "f64")
            state, lg = decoder_step(model, P, state, emb[i - 1], z, enc)
            logits.append(lg.value)
        runs.append(np.stack(logits))
    np.testing.assert_allclose(runs[0], runs[1], atol=1e-5)


@pytest.mark.parametrize("kind", [BASELINE, SENT, SDEC])
def test_nll_decreases_over_first_50_steps(kind):
    corpus = generate_copy_corpus(12, 50, (3, 6), seed=5)
    cfg = TrainConfig(kind=kind, emb_dim=16, units=24, att_dim=16, latent_dim=4, batch_size=10,
                      max_steps=50, lr=3e-3, dev_every=0, seed=2)
    res = train(cfg, corpus)
    recon = [-r["recon"] for r in res.metrics]
    assert np.mean(recon[-5:]) < np.mean(recon[:5])
