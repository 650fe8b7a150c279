"""Optimisation: Adam, clipping, batching, the KL-annealed training loop."""
from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .checkpoint import MODEL_CONFIG, CheckpointError, read_arrays, write_arrays
from .corpus import (ParallelCorpus, TokenBatch, Vocab, build_vocab, encode_corpus,
                     make_batch)
from .inference import InferenceNetwork, attach_inference_network, kl_scale, sequence_elbo
from .layers import ParamStore
from .models import (BASELINE, SDEC, LatentMode, ModelConfig, Seq2Seq, decoder_step,
                     embed_positions, encode_source, initial_decoder_state, prior_initial,
                     prior_step, target_masks, teacher_forced)

logger = logging.getLogger(__name__)

# named RNG sub-streams derived from the master seed
DATA, INIT, LATENT, DROPOUT, EVAL = range(5)


def substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream, *(int(e) for e in extra)])


class NonFiniteGradientError(FloatingPointError):
    pass


class DivergenceError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "OptimizerState":
        st = cls(**hyper)
        for name, arr in params.arrays.items():
            st.m[name] = np.zeros_like(arr)
            st.v[name] = np.zeros_like(arr)
        return st


def adam_step(state: OptimizerState, params: ParamStore, grads: Dict[str, np.ndarray]):
    """One bias-corrected Adam update, in the store's parameter order.

    Parameters with no gradient entry are treated as having zero gradient.
    """
    for name in params.names():
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name in params.names():
        p = params.arrays[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = g.astype(p.dtype, copy=False)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        params.arrays[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
    return params, state


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Dict[str, np.ndarray]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return OrderedDict((k, (g * scale).astype(g.dtype)) for k, g in grads.items())


# ---------------------------------------------------------------------------
# batching


def make_batches(pairs: Sequence[Tuple[Sequence[int], Sequence[int]]], batch_size: int,
                 rng: np.random.Generator, bucketing: bool = False,
                 max_len: Optional[int] = None) -> List[TokenBatch]:
    """One epoch of padded batches over encoded pairs.

    Pairs longer than ``max_len`` on either side are skipped (counted in a
    warning).  With ``bucketing`` the shuffled pairs are grouped by source
    length before batching and the batch order is shuffled again.
    """
    if not pairs:
        raise ValueError("make_batches: empty corpus")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    keep = [k for k, (s, t) in enumerate(pairs)
            if max_len is None or (len(s) <= max_len and len(t) <= max_len)]
    skipped = len(pairs) - len(keep)
    if skipped:
        logger.warning("make_batches: skipped %d pairs longer than %d tokens", skipped, max_len)
    if not keep:
        raise ValueError("make_batches: every pair exceeds max_len")
    order = [keep[i] for i in rng.permutation(len(keep))]
    if bucketing:
        order.sort(key=lambda k: (len(pairs[k][0]), len(pairs[k][1])))
    groups = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if bucketing:
        groups = [groups[i] for i in rng.permutation(len(groups))]
    return [make_batch([pairs[k] for k in g]) for g in groups]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    kind: str = "SDEC"
    emb_dim: int = 32
    units: int = 64
    att_dim: int = 32
    latent_dim: int = 16
    retain: float = 1.0
    precision: str = "f32"
    seed: int = 1
    batch_size: int = 16
    max_steps: int = 2000
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_norm: float = 5.0
    anneal_steps: int = 20000
    bucketing: bool = False
    max_len: int = 50
    dev_every: int = 200
    checkpoint_every: int = 0
    log_wallclock: bool = False

    def __post_init__(self):
        self.kind = str(self.kind).upper()
        if self.kind == BASELINE:
            self.latent_dim = 0
        self.model_config(5, 5)

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, kind=self.kind,
                           emb_dim=self.emb_dim, units=self.units, att_dim=self.att_dim,
                           latent_dim=self.latent_dim, retain=self.retain,
                           precision=self.precision)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kw[key] = parse_value(types[key], raw)
        return cls(**kw)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def parse_value(type_name, raw):
    if not isinstance(raw, str):
        return raw
    type_name = getattr(type_name, "__name__", type_name)
    if type_name == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name == "int":
        return int(raw)
    if type_name == "float":
        return float(raw)
    return raw


# ---------------------------------------------------------------------------
# loss


@dataclass
class StepResult:
    loss: float
    recon: float
    kl: float
    grads: Dict[str, np.ndarray]


def batch_loss(model: Seq2Seq, infnet: Optional[InferenceNetwork], batch: TokenBatch,
               weight: float, latent_rng, dropout_rng, train: bool = True) -> StepResult:
    """Per-sentence loss and its gradient.

    BASELINE minimises NLL; latent models minimise the negative KL-scaled ELBO.
    """
    P = model.bind()
    B = len(batch)
    if model.kind == BASELINE:
        logps, _ = teacher_forced(model, P, batch, train=train, rng=dropout_rng)
        recon = ad.sum(ad.stack(logps, axis=1))
        loss = recon * (-1.0 / B)
        kl = 0.0
    else:
        rep = sequence_elbo(model, infnet, batch, latent_rng, weight, P=P, train=train,
                            dropout_rng=dropout_rng)
        loss = rep.objective * (-1.0 / B)
        recon = None
        kl = rep.kl_total / B
    grads = ad.backward(loss)
    recon_val = float(recon.value) / B if recon is not None else rep.recon_total / B
    return StepResult(float(loss.value), recon_val, kl, grads)


def dev_metric(model: Seq2Seq, infnet: Optional[InferenceNetwork], pairs, seed: int,
               batch_size: int = 64) -> float:
    """Mean per-sentence log-likelihood (BASELINE) or unscaled ELBO (latent kinds)."""
    total = 0.0
    rng = substream(seed, EVAL)
    for start in range(0, len(pairs), batch_size):
        batch = make_batch(pairs[start:start + batch_size])
        if model.kind == BASELINE:
            logps, _ = teacher_forced(model, model.bind(), batch)
            total += float(np.sum([lp.value.sum() for lp in logps]))
        else:
            total += sequence_elbo(model, infnet, batch, rng, 1.0).unscaled_elbo
    return total / len(pairs)


# ---------------------------------------------------------------------------
# training loop

METRICS_HEADER = "step,loss,recon,kl,kl_scale,dev_metric,wallclock_s"


@dataclass
class TrainResult:
    model: Seq2Seq
    infnet: Optional[InferenceNetwork]
    optstate: OptimizerState
    src_vocab: Vocab
    tgt_vocab: Vocab
    metrics: List[Dict[str, float]]
    out_dir: Optional[Path] = None

    @property
    def losses(self) -> List[float]:
        return [row["loss"] for row in self.metrics]


def build_model(config: TrainConfig, src_vocab_size: int, tgt_vocab_size: int):
    rng = substream(config.seed, INIT)
    model = Seq2Seq(config.model_config(src_vocab_size, tgt_vocab_size), rng=rng)
    infnet = None if model.kind == BASELINE else InferenceNetwork(model, rng=rng)
    return model, infnet


class EpochSchedule:
    """Maps a global step to its batch; epoch e is shuffled by (seed, DATA, e)."""

    def __init__(self, pairs, config: TrainConfig):
        self.pairs = pairs
        self.config = config
        self._epoch = -1
        self._batches: List[TokenBatch] = []

    def batch(self, step: int) -> TokenBatch:
        n = self.batches_per_epoch
        epoch, k = divmod(step, n)
        if epoch != self._epoch:
            c = self.config
            self._batches = make_batches(self.pairs, c.batch_size, substream(c.seed, DATA, epoch),
                                         c.bucketing, c.max_len)
            self._epoch = epoch
        return self._batches[k]

    @property
    def batches_per_epoch(self) -> int:
        c = self.config
        kept = sum(1 for s, t in self.pairs if len(s) <= c.max_len and len(t) <= c.max_len)
        return -(-kept // c.batch_size)


def train(config: TrainConfig, corpus: ParallelCorpus, dev_corpus: Optional[ParallelCorpus] = None,
          out_dir=None, resume_from=None, vocabs: Optional[Tuple[Vocab, Vocab]] = None
          ) -> TrainResult:
    """Train for ``config.max_steps`` optimiser steps.

    Everything random derives from ``config.seed``: initialisation, batch
    order (per epoch), latent noise and dropout masks (per step).  Resuming
    from a checkpoint therefore continues the exact same trajectory.
    """
    src_vocab, tgt_vocab = vocabs or (build_vocab(corpus.sources()), build_vocab(corpus.targets()))
    pairs = encode_corpus(corpus, src_vocab, tgt_vocab)
    dev_pairs = encode_corpus(dev_corpus, src_vocab, tgt_vocab) if dev_corpus else []
    model, infnet = build_model(config, len(src_vocab), len(tgt_vocab))
    opt = OptimizerState.for_params(model.params, lr=config.lr, beta1=config.beta1,
                                    beta2=config.beta2, eps=config.adam_eps)
    if resume_from is not None:
        load_checkpoint(resume_from, model, opt)

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(config.to_text(), encoding="utf-8")
        src_vocab.save(out_dir / "src.vocab")
        tgt_vocab.save(out_dir / "tgt.vocab")
        metrics_path = out_dir / "metrics.csv"
        append = resume_from is not None and metrics_path.exists()
        if append:
            _truncate_metrics(metrics_path, opt.t)
        metrics_file = open(metrics_path, "a" if append else "w", encoding="utf-8")
        if not append:
            metrics_file.write(METRICS_HEADER + "\n")

    schedule = EpochSchedule(pairs, config)
    rows: List[Dict[str, float]] = []
    start_time = time.perf_counter()
    try:
        while opt.t < config.max_steps:
            step = opt.t
            weight = kl_scale(step, config.anneal_steps)
            batch = schedule.batch(step)
            res = batch_loss(model, infnet, batch, weight, substream(config.seed, LATENT, step),
                             substream(config.seed, DROPOUT, step))
            if not math.isfinite(res.loss):
                raise DivergenceError(f"loss became {res.loss} at step {step}")
            grads = clip_global_norm(res.grads, config.max_norm)
            adam_step(opt, model.params, grads)
            dev = None
            if dev_pairs and config.dev_every and (opt.t % config.dev_every == 0
                                                   or opt.t == config.max_steps):
                dev = dev_metric(model, infnet, dev_pairs, config.seed)
            row = {"step": step, "loss": res.loss, "recon": res.recon, "kl": res.kl,
                   "kl_scale": weight, "dev_metric": dev,
                   "wallclock_s": time.perf_counter() - start_time}
            rows.append(row)
            if metrics_file is not None:
                metrics_file.write(_metrics_line(row, config.log_wallclock))
            if out_dir is not None and config.checkpoint_every and opt.t % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"ckpt-{opt.t}", model, opt)
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "final", model, opt)
    return TrainResult(model, infnet, opt, src_vocab, tgt_vocab, rows, out_dir)


def _metrics_line(row, log_wallclock: bool) -> str:
    dev = "" if row["dev_metric"] is None else repr(float(row["dev_metric"]))
    wall = f"{row['wallclock_s']:.3f}" if log_wallclock else ""
    return (f"{row['step']},{row['loss']!r},{row['recon']!r},{float(row['kl'])!r},"
            f"{row['kl_scale']!r},{dev},{wall}\n")


def _truncate_metrics(path: Path, step: int):
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < step]
    path.write_text("".join(kept), encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Seq2Seq, opt: OptimizerState):
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, arr in model.params.arrays.items():
        arrays[f"param/{name}"] = arr
    for name in opt.m:
        arrays[f"adam.m/{name}"] = opt.m[name]
        arrays[f"adam.v/{name}"] = opt.v[name]
    hyper = (f"lr={opt.lr!r}\nbeta1={opt.beta1!r}\nbeta2={opt.beta2!r}\neps={opt.eps!r}\n")
    write_arrays(path, arrays, opt.t, {MODEL_CONFIG: model.config.to_text(),
                                        "optimizer.txt": hyper})


def load_checkpoint(path, model: Seq2Seq, opt: Optional[OptimizerState] = None) -> int:
    """Restore parameters (and optimiser state) in place; returns the step."""
    arrays, step = read_arrays(path)
    for name in model.params.names():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if arrays[key].shape != model.params[name].shape:
            raise CheckpointError(f"{name}: shape {arrays[key].shape} != {model.params[name].shape}")
        model.params.arrays[name] = arrays[key].copy()
    if opt is not None:
        for name in model.params.names():
            opt.m[name] = arrays[f"adam.m/{name}"].copy()
            opt.v[name] = arrays[f"adam.v/{name}"].copy()
        opt.t = step
    return step


def load_model(path) -> Tuple[Seq2Seq, Optional[InferenceNetwork], int]:
    """Rebuild a model (and inference network) from a checkpoint directory."""
    path = Path(path)
    try:
        config = ModelConfig.from_text((path / MODEL_CONFIG).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"missing {path / MODEL_CONFIG}") from None
    model = Seq2Seq(config)
    infnet = attach_inference_network(model)
    step = load_checkpoint(path, model)
    return model, infnet, step


def token_accuracy(model: Seq2Seq, pairs, batch_size: int = 64) -> float:
    """Teacher-forced argmax accuracy over target tokens (EOS included).

    Latent models use the prior-mean protocol.
    """
    correct = total = 0
    latents = None if model.kind == BASELINE else LatentMode.PRIOR_MEAN
    for start in range(0, len(pairs), batch_size):
        batch = make_batch(pairs[start:start + batch_size])
        hits = _teacher_forced_hits(model, batch, latents)
        correct += int(hits.sum())
        total += batch.num_target_tokens
    return correct / total


def _teacher_forced_hits(model: Seq2Seq, batch: TokenBatch, latents) -> np.ndarray:
    P = model.bind()
    enc = encode_source(model, P, batch.src, batch.src_len)
    state = initial_decoder_state(model, P, enc.final)
    emb = embed_positions(P[model.tgt_emb], batch.tgt)
    mask = target_masks(batch)
    z = None if latents is None else prior_initial(model, P, enc.final).mu
    hits = np.zeros(mask.shape, dtype=bool)
    for i in range(1, batch.tgt.shape[1]):
        if model.kind == SDEC:
            z = prior_step(model, P, state.hidden, z).mu
        state, logits = decoder_step(model, P, state, emb[i - 1], z, enc)
        hits[:, i - 1] = (np.argmax(logits.value, axis=-1) == batch.tgt[:, i]) & mask[:, i - 1]
    return hits
