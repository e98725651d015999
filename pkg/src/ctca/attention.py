"""Attention decoder branch.

Per output step s, with encoder rows h_t and previous attention weights
eps_{s-1}:

    f_s      = conv(prev weights, location filter bank)      (T', n_filters)
    e_{s,t}  = w^T tanh(Wd d_{s-1} + Wh h_t + Wf f_{s,t} + b)
    eps_s    = exp(e)/sum exp(e)            (mode "softmax")
             | sigmoid(e)/sum sigmoid(e)    (mode "smoothed")
    a_s      = sum_t eps_{s,t} h_t
    d_s      = 2-layer LSTM step on [embed(y_{s-1}); a_s]
    p(y_s)   = softmax(FC([d_s top hidden; a_s]))

The smoothed mode flattens the weight distribution: sigmoid grows much
slower than exp, so pairwise weight ratios shrink toward 1 while the
ordering of energies is preserved.

Training is teacher-forced; the decoder state starts at zeros and the
initial attention weights are uniform over the T' frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoder import init_lstm_block, lstm_cell_step, uniform_tensor
from .numerics import Tensor
from .rng import Pcg32

MODES = ("softmax", "smoothed")


@dataclass
class AttentionConfig:
    att_dim: int = 64
    loc_filters: int = 4
    loc_width: int = 7  # odd; same-padded convolution over the weight vector
    dec_layers: int = 2
    dec_cells: int = 64
    embed_dim: int = 32
    mode: str = "smoothed"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"attention mode {self.mode!r} not in {MODES}")
        if self.loc_width % 2 != 1:
            raise ValueError("loc_width must be odd for same padding")


@dataclass
class DecoderState:
    layers: list  # [(h, c)] per LSTM layer, each (1, dec_cells)
    prev_weights: Tensor  # (T',), non-negative, sums to 1

    @property
    def top_hidden(self) -> Tensor:
        return self.layers[-1][0]


def init_attention_params(config: AttentionConfig, encoder_dim: int,
                          vocab_size: int, rng: Pcg32) -> dict[str, Tensor]:
    a = config.att_dim
    params: dict[str, Tensor] = {
        "att/energy/w": uniform_tensor(rng, (a,)),
        "att/energy/wd": uniform_tensor(rng, (config.dec_cells, a)),
        "att/energy/wh": uniform_tensor(rng, (encoder_dim, a)),
        "att/energy/wf": uniform_tensor(rng, (config.loc_filters, a)),
        "att/energy/b": uniform_tensor(rng, (a,)),
        "att/loc/filters": uniform_tensor(rng, (config.loc_width, 1, config.loc_filters)),
        "att/emb": uniform_tensor(rng, (vocab_size, config.embed_dim)),
        "att/fc/w": uniform_tensor(rng, (config.dec_cells + encoder_dim, vocab_size)),
        "att/fc/b": uniform_tensor(rng, (vocab_size,)),
    }
    din = config.embed_dim + encoder_dim
    for l in range(config.dec_layers):
        params.update(init_lstm_block(rng, din, config.dec_cells, f"att/dec/l{l}"))
        din = config.dec_cells
    return params


def initial_state(t_len: int, config: AttentionConfig) -> DecoderState:
    layers = [(Tensor(np.zeros((1, config.dec_cells))),
               Tensor(np.zeros((1, config.dec_cells))))
              for _ in range(config.dec_layers)]
    return DecoderState(layers, Tensor(np.full(t_len, 1.0 / t_len)))


def energies(state: DecoderState, h: Tensor, params: dict[str, Tensor],
             hproj: Tensor | None = None) -> Tensor:
    """One scalar energy per encoder frame, (T',)."""
    t_len = h.shape[0]
    if hproj is None:
        hproj = nm.matmul(h, params["att/energy/wh"])
    loc = nm.conv1d_same(nm.reshape(state.prev_weights, (t_len, 1)),
                         params["att/loc/filters"])
    fproj = nm.matmul(loc, params["att/energy/wf"])
    dproj = nm.matmul(state.top_hidden, params["att/energy/wd"])
    bias = nm.add(nm.reshape(dproj, (params["att/energy/b"].shape[0],)),
                  params["att/energy/b"])
    hidden = nm.tanh(nm.add(nm.add(hproj, fproj), bias))
    return nm.matmul(hidden, params["att/energy/w"])


def weights(e: Tensor, mode: str) -> Tensor:
    """Normalize energies into attention weights (both modes sum to 1)."""
    if mode == "softmax":
        return nm.softmax(e)
    if mode == "smoothed":
        sig = nm.sigmoid(e)
        return nm.div(sig, nm.reshape(nm.sum_all(sig), (1,)))
    raise ValueError(f"unknown attention mode {mode!r}")


def context(eps: Tensor, h: Tensor) -> Tensor:
    """Weighted sum of encoder rows, (D,)."""
    return nm.matmul(eps, h)


def decoder_step(state: DecoderState, y_prev: int, a: Tensor,
                 params: dict[str, Tensor], config: AttentionConfig,
                 new_weights: Tensor | None = None):
    """Advance the decoder one step; returns (new state, log-probs over V)."""
    vocab_size = params["att/emb"].shape[0]
    if not (0 <= y_prev < vocab_size):
        raise ValueError(f"unit id {y_prev} out of range for vocab of {vocab_size}")
    emb = nm.narrow(params["att/emb"], 0, y_prev, 1)
    x = nm.concat([emb, nm.reshape(a, (1, a.shape[0]))], axis=1)
    new_layers = []
    for l, (h_prev, c_prev) in enumerate(state.layers):
        h_new, c_new = lstm_cell_step(x, (h_prev, c_prev),
                                      params[f"att/dec/l{l}/wx"],
                                      params[f"att/dec/l{l}/wh"],
                                      params[f"att/dec/l{l}/b"])
        new_layers.append((h_new, c_new))
        x = h_new
    out_in = nm.concat([new_layers[-1][0], nm.reshape(a, (1, a.shape[0]))], axis=1)
    logits = nm.add(nm.matmul(out_in, params["att/fc/w"]), params["att/fc/b"])
    logp = nm.reshape(nm.log_softmax(logits), (logits.shape[1],))
    new_state = DecoderState(new_layers,
                             state.prev_weights if new_weights is None else new_weights)
    return new_state, logp


def step_scores(state: DecoderState, y_prev: int, h: Tensor,
                params: dict[str, Tensor], config: AttentionConfig,
                hproj: Tensor | None = None):
    """Full attention step: energies -> weights -> context -> decoder."""
    e = energies(state, h, params, hproj)
    eps = weights(e, config.mode)
    a = context(eps, h)
    return decoder_step(state, y_prev, a, params, config, new_weights=eps)


def attention_nll(h: Tensor, target: list[int], params: dict[str, Tensor],
                  config: AttentionConfig, sos: int = 1, eos: int = 2) -> Tensor:
    """Teacher-forced negative log-likelihood of `target` (sos ... eos)."""
    nll, _, _ = attention_nll_with_hits(h, target, params, config, sos, eos)
    return nll


def attention_nll_with_hits(h: Tensor, target: list[int],
                            params: dict[str, Tensor], config: AttentionConfig,
                            sos: int = 1, eos: int = 2):
    """Returns (nll tensor, argmax hits, steps); hits/steps feed the
    teacher-forcing accuracy metric. The eos step is included."""
    if len(target) < 2 or target[0] != sos or target[-1] != eos:
        raise ValueError("target must be [sos, ...units..., eos]")
    state = initial_state(h.shape[0], config)
    hproj = nm.matmul(h, params["att/energy/wh"])
    losses = []
    hits = 0
    for y_prev, y_out in zip(target[:-1], target[1:]):
        state, logp = step_scores(state, y_prev, h, params, config, hproj)
        losses.append(nm.narrow(logp, 0, y_out, 1))
        if int(np.argmax(logp.data)) == y_out:
            hits += 1
    total = nm.neg(nm.reshape(nm.add_n(losses) if len(losses) > 1 else losses[0], ()))
    return total, hits, len(target) - 1
