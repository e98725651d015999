"""Recurrent language model over subword units: a 2-layer LSTM trained with
plain SGD (initial learning rate 1.0, decayed by 0.9 every 2 epochs), scored
per step for shallow fusion and per corpus for perplexity.

Each corpus line is one sentence, modelled as sos ... eos with no state
carried across sentences. Perplexity is exp(mean per-token negative
log-likelihood) with the eos predictions included.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .encoder import init_lstm_block, lstm_cell_step, uniform_tensor
from .numerics import Tensor
from .rng import Pcg32, STREAM_PARAMS, STREAM_SHUFFLE
from .subword import SubwordVocab, encode as bpe_encode
from .training import clip_global_norm


@dataclass
class LmConfig:
    layers: int = 2
    cells: int = 64
    embed_dim: int = 32


@dataclass
class LmTrainConfig:
    lr: float = 1.0
    lr_decay: float = 0.9
    decay_every: int = 2  # epochs
    epochs: int = 10
    clip_norm: float = 5.0
    l2: float = 0.0


LmState = list  # [(h, c)] per layer


# Weight matrices start at uniform(-0.4, 0.4): the few dozen SGD steps of a
# desk-scale run cannot wake up tiny initial logits. Biases stay small with
# the usual +1 forget-gate offset.
LM_INIT_SCALE = 0.4


def init_lm_params(config: LmConfig, vocab_size: int, seed: int) -> dict[str, Tensor]:
    rng = Pcg32(seed, STREAM_PARAMS + 100)
    params: dict[str, Tensor] = {
        "lm/emb": uniform_tensor(rng, (vocab_size, config.embed_dim), LM_INIT_SCALE)}
    din = config.embed_dim
    for l in range(config.layers):
        blk = init_lstm_block(rng, din, config.cells, f"lm/l{l}")
        for name, t in blk.items():
            if not name.endswith("/b"):
                t.data *= LM_INIT_SCALE / 0.08
        params.update(blk)
        din = config.cells
    params["lm/fc/w"] = uniform_tensor(rng, (config.cells, vocab_size), LM_INIT_SCALE)
    params["lm/fc/b"] = uniform_tensor(rng, (vocab_size,), LM_INIT_SCALE)
    return params


def initial_lm_state(config: LmConfig) -> LmState:
    return [(Tensor(np.zeros((1, config.cells))), Tensor(np.zeros((1, config.cells))))
            for _ in range(config.layers)]


def lm_step(state: LmState, unit_id: int, params: dict[str, Tensor],
            config: LmConfig) -> tuple[LmState, Tensor]:
    """Advance one token; returns (new state, log-distribution over V)."""
    vocab_size = params["lm/emb"].shape[0]
    if not (0 <= unit_id < vocab_size):
        raise ValueError(f"unit id {unit_id} out of range for vocab of {vocab_size}")
    x = nm.narrow(params["lm/emb"], 0, unit_id, 1)
    new_state = []
    for l, (h, c) in enumerate(state):
        h, c = lstm_cell_step(x, (h, c), params[f"lm/l{l}/wx"],
                              params[f"lm/l{l}/wh"], params[f"lm/l{l}/b"])
        new_state.append((h, c))
        x = h
    logits = nm.add(nm.matmul(x, params["lm/fc/w"]), params["lm/fc/b"])
    logp = nm.reshape(nm.log_softmax(logits), (logits.shape[1],))
    return new_state, logp


def lm_state_to_bytes(state: LmState) -> bytes:
    chunks = [struct.pack("<II", len(state), state[0][0].shape[1])]
    for h, c in state:
        chunks.append(h.data.astype("<f8").tobytes())
        chunks.append(c.data.astype("<f8").tobytes())
    return b"".join(chunks)


def lm_state_from_bytes(raw: bytes) -> LmState:
    layers, cells = struct.unpack_from("<II", raw, 0)
    off = 8
    state = []
    for _ in range(layers):
        h = np.frombuffer(raw, dtype="<f8", count=cells, offset=off).reshape(1, cells)
        off += 8 * cells
        c = np.frombuffer(raw, dtype="<f8", count=cells, offset=off).reshape(1, cells)
        off += 8 * cells
        state.append((Tensor(h.copy()), Tensor(c.copy())))
    return state


def sentence_token_nlls(params: dict[str, Tensor], ids: list[int],
                        vocab: SubwordVocab, config: LmConfig) -> list[Tensor]:
    """Per-token -log p over sos ids... eos (one entry per predicted token)."""
    state = initial_lm_state(config)
    inputs = [vocab.sos_id] + ids
    targets = ids + [vocab.eos_id]
    nlls = []
    for x, y in zip(inputs, targets):
        state, logp = lm_step(state, x, params, config)
        nlls.append(nm.neg(nm.reshape(nm.narrow(logp, 0, y, 1), ())))
    return nlls


def lm_train(corpus: list[str], vocab: SubwordVocab, config: LmConfig,
             train_config: LmTrainConfig, seed: int,
             log=lambda msg: None) -> tuple[dict[str, Tensor], list[float]]:
    """SGD over per-sentence NLL sums; returns (params, per-epoch mean loss)."""
    sentences = [bpe_encode(line, vocab) for line in corpus if line.strip()]
    if not sentences:
        raise ValueError("lm_train: empty corpus")
    params = init_lm_params(config, vocab.size, seed)
    epoch_losses = []
    for epoch in range(train_config.epochs):
        lr = lr_for_epoch(epoch, train_config)
        order = list(range(len(sentences)))
        Pcg32(seed, STREAM_SHUFFLE + 500 + epoch).shuffle(order)
        total = 0.0
        for si in order:
            nlls = sentence_token_nlls(params, sentences[si], vocab, config)
            loss = nm.add_n(nlls) if len(nlls) > 1 else nlls[0]
            total += loss.item()
            for p in params.values():
                p.zero_grad()
            nm.backward(loss)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for n, p in params.items()}
            if train_config.l2 > 0.0:
                for n, p in params.items():
                    grads[n] = grads[n] + train_config.l2 * p.data
            clip_global_norm(grads, train_config.clip_norm)
            for n, p in params.items():
                p.data -= lr * grads[n]
        epoch_losses.append(total / len(sentences))
        log(f"lm epoch {epoch + 1}: lr {lr:.4f} mean sentence nll {epoch_losses[-1]:.4f}")
    return params, epoch_losses


def lr_for_epoch(epoch: int, config: LmTrainConfig) -> float:
    """Learning rate while running epoch `epoch` (0-based): decayed once per
    `decay_every` completed epochs."""
    return config.lr * config.lr_decay ** (epoch // config.decay_every)


def perplexity(params: dict[str, Tensor], corpus: list[str], vocab: SubwordVocab,
               config: LmConfig) -> float:
    """exp(mean per-token NLL) over the corpus, eos tokens included."""
    lines = [line for line in corpus if line.strip()]
    if not lines:
        raise ValueError("perplexity: empty corpus")
    nlls: list[float] = []
    for line in lines:
        ids = bpe_encode(line, vocab)
        nlls.extend(t.item() for t in sentence_token_nlls(params, ids, vocab, config))
    return math.exp(math.fsum(nlls) / len(nlls))
