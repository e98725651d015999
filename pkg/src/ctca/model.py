"""Composition of the shared encoder with both decoder branches: parameter
construction and the per-utterance loss forward pass used by training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, attention_nll_with_hits, init_attention_params
from .ctc import CtcBranchConfig, ctc_branch_forward, ctc_loss_node, init_ctc_params
from .encoder import EncoderConfig, encode, init_encoder_params
from .numerics import Tensor
from .rng import Pcg32, STREAM_PARAMS
from .subword import SubwordVocab


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    ctc_branch: CtcBranchConfig = field(default_factory=CtcBranchConfig)


def build_model_params(config: ModelConfig, vocab_size: int, seed: int) -> dict[str, Tensor]:
    rng = Pcg32(seed, STREAM_PARAMS)
    params = init_encoder_params(config.encoder, rng)
    params.update(init_ctc_params(config.ctc_branch, config.encoder.output_dim,
                                  vocab_size, rng))
    params.update(init_attention_params(config.attention, config.encoder.output_dim,
                                        vocab_size, rng))
    return params


@dataclass
class UtteranceForward:
    ctc_loss: Tensor | None  # None when alpha == 0; +inf tensor when infeasible
    att_loss: Tensor
    hits: int
    steps: int
    encoded: Tensor

    @property
    def ctc_infeasible(self) -> bool:
        return self.ctc_loss is not None and math.isinf(self.ctc_loss.item())


def utterance_forward(feats: np.ndarray, label_ids: list[int],
                      params: dict[str, Tensor], config: ModelConfig,
                      vocab: SubwordVocab, need_ctc: bool = True) -> UtteranceForward:
    """Run both branches on one utterance (labels are bare unit ids)."""
    h = encode(feats, params, config.encoder)
    ctc_loss = None
    if need_ctc:
        q = ctc_branch_forward(h, params, config.ctc_branch)
        ctc_loss = ctc_loss_node(q, label_ids, blank=vocab.blank_id)
    target = [vocab.sos_id] + list(label_ids) + [vocab.eos_id]
    att_loss, hits, steps = attention_nll_with_hits(
        h, target, params, config.attention, sos=vocab.sos_id, eos=vocab.eos_id)
    return UtteranceForward(ctc_loss, att_loss, hits, steps, h)


def encoder_posteriors(feats: np.ndarray, params: dict[str, Tensor],
                       config: ModelConfig) -> tuple[Tensor, np.ndarray]:
    """Encoded sequence plus CTC posteriors (decode-time helper)."""
    h = encode(feats, params, config.encoder)
    q = ctc_branch_forward(h, params, config.ctc_branch)
    return h, q.data
