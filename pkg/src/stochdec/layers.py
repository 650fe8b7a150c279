"""Parameterised building blocks shared by every model.

Layers are plain objects that remember parameter *names* and dimensions.  A
forward pass starts with :meth:`ParamStore.bind`, which wraps every array as a
named autodiff leaf; layers look their weights up in that binding, so all
layers used in one loss share a single set of leaves.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Expr

SIGMA_FLOOR = 1e-6
MASK_SCORE = -1e9


class ParamStore:
    """Ordered name -> array mapping.  Names are unique and shapes fixed."""

    def __init__(self, precision: str = "f32"):
        self.precision = precision
        self.dtype = ad.as_dtype(precision)
        self.arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.init_tags: Dict[str, str] = {}

    def add(self, name: str, shape, init: str, rng: np.random.Generator,
            value: float = 0.0) -> str:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "glorot":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], 1)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        elif init == "const":
            arr = np.full(shape, value)
        elif init == "normal":
            arr = rng.normal(0.0, 0.1, size=shape)
        else:
            raise ValueError(f"unknown initializer {init!r}")
        self.arrays[name] = arr.astype(self.dtype)
        self.init_tags[name] = init
        return name

    def names(self) -> List[str]:
        return list(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self.arrays:
            raise KeyError(name)
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != self.arrays[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self.arrays[name].shape}")
        self.arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __len__(self):
        return len(self.arrays)

    def bind(self) -> Dict[str, Expr]:
        return {n: ad.leaf(n, a, precision=self.precision) for n, a in self.arrays.items()}

    def copy(self) -> "ParamStore":
        other = ParamStore(self.precision)
        other.arrays = OrderedDict((k, v.copy()) for k, v in self.arrays.items())
        other.init_tags = dict(self.init_tags)
        return other

    def astype(self, precision: str) -> "ParamStore":
        other = self.copy()
        other.precision = precision
        other.dtype = ad.as_dtype(precision)
        for k in other.arrays:
            other.arrays[k] = other.arrays[k].astype(other.dtype)
        return other


@dataclass
class RnnState:
    hidden: Expr
    cell: Expr

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ad.ShapeError(f"RnnState: hidden {self.hidden.shape} != cell {self.cell.shape}")


@dataclass
class GaussianParams:
    mu: Expr
    sigma: Expr


def zeros(shape, precision) -> Expr:
    return ad.const(np.zeros(shape), precision)


# ---------------------------------------------------------------------------


class Linear:
    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int,
                 rng: np.random.Generator):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.w = store.add(f"{name}.W", (in_dim, out_dim), "glorot", rng)
        self.b = store.add(f"{name}.b", (out_dim,), "const", rng)

    def __call__(self, P: Dict[str, Expr], x: Expr) -> Expr:
        if x.shape is not None and x.shape[-1] != self.in_dim:
            raise ad.ShapeError(f"linear {self.w}: input dim {x.shape[-1]} != {self.in_dim}")
        return ad.add(ad.matmul(x, P[self.w]), P[self.b])


class LSTMCell:
    """Gate layout in the fused weight: input, forget, output, candidate."""

    def __init__(self, store: ParamStore, name: str, in_dim: int, units: int,
                 rng: np.random.Generator, forget_bias: float = 1.0):
        self.in_dim, self.units = in_dim, units
        self.w = store.add(f"{name}.W", (in_dim + units, 4 * units), "glorot", rng)
        self.b = store.add(f"{name}.b", (4 * units,), "const", rng)
        store[self.b] = np.concatenate([np.zeros(units), np.full(units, forget_bias),
                                        np.zeros(2 * units)])

    def __call__(self, P: Dict[str, Expr], x: Expr, state: RnnState) -> RnnState:
        if x.shape is not None and x.shape[-1] != self.in_dim:
            raise ad.ShapeError(f"lstm {self.w}: input dim {x.shape[-1]} != {self.in_dim}")
        u = self.units
        pre = ad.add(ad.matmul(ad.concat([x, state.hidden]), P[self.w]), P[self.b])
        i = ad.sigmoid(ad.slice_last(pre, 0, u))
        f = ad.sigmoid(ad.slice_last(pre, u, 2 * u))
        o = ad.sigmoid(ad.slice_last(pre, 2 * u, 3 * u))
        g = ad.tanh(ad.slice_last(pre, 3 * u, 4 * u))
        cell = ad.add(ad.mul(f, state.cell), ad.mul(i, g))
        hidden = ad.mul(o, ad.tanh(cell))
        return RnnState(hidden, cell)

    def zero_state(self, batch: int, precision) -> RnnState:
        return RnnState(zeros((batch, self.units), precision), zeros((batch, self.units), precision))


def _step_masks(lengths: np.ndarray, max_len: int, units: int, precision):
    """Per-position [B, units] keep-masks for a padded batch."""
    lengths = np.asarray(lengths)
    valid = np.arange(max_len)[None, :] < lengths[:, None]
    keep = [np.repeat(valid[:, t:t + 1], units, axis=1).astype(float) for t in range(max_len)]
    return [(ad.const(k, precision), ad.const(1.0 - k, precision)) for k in keep], valid


def _check_lengths(lengths, max_len):
    lengths = np.asarray(lengths)
    if lengths.size == 0 or lengths.min() < 1:
        raise ValueError("zero-length sequence")
    if lengths.max() > max_len:
        raise ValueError(f"length {lengths.max()} exceeds padded length {max_len}")
    return lengths


def run_lstm(cell: LSTMCell, P, inputs: Sequence[Expr], lengths, reverse: bool = False,
             precision="f32") -> Tuple[List[Expr], RnnState]:
    """Run ``cell`` over per-position inputs honouring padding.

    Padded positions carry the previous state through and output zeros.  With
    ``reverse`` the sweep starts at each row's last valid token, so index i
    holds the state after consuming positions i..len-1.
    """
    T = len(inputs)
    lengths = _check_lengths(lengths, T)
    B = len(lengths)
    keep, valid = _step_masks(lengths, T, cell.units, precision)
    state = cell.zero_state(B, precision)
    outputs: List[Optional[Expr]] = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        new = cell(P, inputs[t], state)
        m, carry = keep[t]
        if valid[:, t].all():
            hidden, c = new.hidden, new.cell
        else:
            hidden = ad.add(ad.mul(new.hidden, m), ad.mul(state.hidden, carry))
            c = ad.add(ad.mul(new.cell, m), ad.mul(state.cell, carry))
        state = RnnState(hidden, c)
        outputs[t] = hidden if valid[:, t].all() else ad.mul(hidden, m)
    return outputs, state


class BiEncoder:
    def __init__(self, store: ParamStore, name: str, in_dim: int, units: int,
                 rng: np.random.Generator):
        self.fw = LSTMCell(store, f"{name}.fw", in_dim, units, rng)
        self.bw = LSTMCell(store, f"{name}.bw", in_dim, units, rng)
        self.units = units

    def __call__(self, P, inputs: Sequence[Expr], lengths, precision="f32"):
        """Returns (per-position [B, 2U] states, final composite state [B, 2U]).

        The composite final state concatenates the forward LSTM's state after
        the last token with the backward LSTM's state after the first.
        """
        fw_out, fw_last = run_lstm(self.fw, P, inputs, lengths, False, precision)
        bw_out, bw_last = run_lstm(self.bw, P, inputs, lengths, True, precision)
        states = [ad.concat([f, b]) for f, b in zip(fw_out, bw_out)]
        return states, ad.concat([fw_last.hidden, bw_last.hidden])


def encode_bidirectional(encoder: BiEncoder, P, embedded: Sequence[Expr], lengths,
                         precision="f32"):
    states, final = encoder(P, embedded, lengths, precision)
    return ad.stack(states, axis=1), final


def encode_reverse(cell: LSTMCell, P, embedded: Sequence[Expr], lengths,
                   precision="f32") -> List[Expr]:
    outputs, _ = run_lstm(cell, P, embedded, lengths, reverse=True, precision=precision)
    return outputs


class Attention:
    """Additive attention: score_j = v . tanh(W [query; key_j] + b).

    W is held as its query and key row blocks so the key half can be
    projected once per source sentence.
    """

    def __init__(self, store: ParamStore, name: str, query_dim: int, key_dim: int,
                 att_dim: int, rng: np.random.Generator):
        self.query_dim, self.key_dim, self.att_dim = query_dim, key_dim, att_dim
        limit = np.sqrt(6.0 / (query_dim + key_dim + att_dim))
        self.w_query = store.add(f"{name}.W_query", (query_dim, att_dim), "const", rng)
        self.w_key = store.add(f"{name}.W_key", (key_dim, att_dim), "const", rng)
        store[self.w_query] = rng.uniform(-limit, limit, (query_dim, att_dim))
        store[self.w_key] = rng.uniform(-limit, limit, (key_dim, att_dim))
        self.b = store.add(f"{name}.b", (att_dim,), "const", rng)
        self.v = store.add(f"{name}.v", (att_dim,), "glorot", rng)

    def precompute(self, P, enc_states: Expr) -> Expr:
        """Key half of the projection plus bias, [B, S, A]."""
        return ad.add(ad.matmul(enc_states, P[self.w_key]), P[self.b])

    def __call__(self, P, query: Expr, enc_states: Expr, source_mask: np.ndarray,
                 keys: Optional[Expr] = None):
        mask = np.asarray(source_mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("attention: a row has no valid source position")
        B, S = mask.shape
        if keys is None:
            keys = self.precompute(P, enc_states)
        q = ad.expand(ad.matmul(query, P[self.w_query]), axis=1, size=S)
        scores = ad.matmul(ad.tanh(ad.add(keys, q)), P[self.v])
        bias = np.where(mask, 0.0, MASK_SCORE)
        alphas = ad.softmax(ad.add(scores, ad.const(bias, scores.dtype)))
        context = ad.reshape(
            ad.matmul(ad.reshape(alphas, (B, 1, S)), enc_states), (B, enc_states.shape[-1]))
        return alphas, context


class GaussianHead:
    """Two single-hidden-layer tanh networks giving mean and scale.

    Hidden width is twice the latent size; the scale network ends in a
    softplus plus a small floor.
    """

    def __init__(self, store: ParamStore, name: str, in_dim: int, latent_dim: int,
                 rng: np.random.Generator):
        self.in_dim, self.latent_dim = in_dim, latent_dim
        self.hidden_dim = 2 * latent_dim
        self.mu_hidden = Linear(store, f"{name}.mu.hidden", in_dim, self.hidden_dim, rng)
        self.mu_out = Linear(store, f"{name}.mu.out", self.hidden_dim, latent_dim, rng)
        self.sigma_hidden = Linear(store, f"{name}.sigma.hidden", in_dim, self.hidden_dim, rng)
        self.sigma_out = Linear(store, f"{name}.sigma.out", self.hidden_dim, latent_dim, rng)

    def __call__(self, P, inputs: Sequence[Expr]) -> GaussianParams:
        x = inputs[0] if len(inputs) == 1 else ad.concat(list(inputs))
        if x.shape is not None and x.shape[-1] != self.in_dim:
            raise ad.ShapeError(
                f"gaussian head {self.mu_hidden.w}: input dim {x.shape[-1]} != {self.in_dim}")
        mu = self.mu_out(P, ad.tanh(self.mu_hidden(P, x)))
        pre = self.sigma_out(P, ad.tanh(self.sigma_hidden(P, x)))
        sigma = ad.add(ad.softplus(pre), ad.const(SIGMA_FLOOR, pre.dtype))
        return GaussianParams(mu, sigma)

    def param_names(self) -> List[str]:
        return [lin.w for lin in self._linears()] + [lin.b for lin in self._linears()]

    def _linears(self):
        return (self.mu_hidden, self.mu_out, self.sigma_hidden, self.sigma_out)


def dropout(x: Expr, retain: float, rng: Optional[np.random.Generator],
            train_mode: bool) -> Expr:
    """Inverted dropout; identity in eval mode or when ``retain == 1``."""
    if not 0.0 < retain <= 1.0:
        raise ValueError(f"retain must lie in (0, 1], got {retain}")
    if not train_mode or retain == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) < retain
    return ad.mul(x, ad.const(keep / retain, x.dtype))
