"""Step-synchronous beam search over the attention decoder, with optional
shallow LM fusion and optional CTC prefix scoring.

Scoring: each hypothesis accumulates att_logp, lm_logp and ctc_logp; its
pruning score is att + lm_weight*lm + ctc_weight*ctc, and the final ranking
adds a length bonus of length_penalty per emitted unit (log-probabilities
only ever decrease with length, so some reward is needed to offset the
early-eos bias). Hypotheses that emit eos move to a completed pool; search
stops once every live hypothesis scores below the best completed one or the
length cap max_len_ratio * T' is hit.

The CTC prefix score of extending prefix g with unit c is
log p(g.c is a prefix of the CTC output) - log p(g is a prefix), via the
usual forward recursion split into blank-ending and non-blank-ending path
sets. Once a prefix is completed at frame t, every continuation of the path
is allowed, so the tail mass needs no bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .attention import AttentionConfig, DecoderState, initial_state, step_scores
from .lm import LmConfig, initial_lm_state, lm_step
from .numerics import Tensor, lse_np
from .subword import SubwordVocab

NEG_INF = -np.inf


@dataclass
class DecodeConfig:
    beam: int = 20
    lm_weight: float = 0.3
    ctc_weight: float = 0.0
    max_len_ratio: float = 1.0
    length_penalty: float = 0.6

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.lm_weight < 0:
            raise ValueError("lm_weight must be >= 0")
        if not 0.0 <= self.ctc_weight < 1.0:
            raise ValueError("ctc_weight must be in [0, 1)")


# ---------------------------------------------------------------------------
# CTC prefix scoring


@dataclass
class CtcPrefixState:
    r_n: np.ndarray  # log prob of length-t paths collapsing to the prefix, non-blank end
    r_b: np.ndarray  # same, blank end
    log_prefix: float  # log p(prefix is a prefix of the output)
    last: int  # last label of the prefix, -1 for empty


class CtcPrefixScorer:
    """Incremental prefix probabilities over fixed posteriors q (T', V)."""

    def __init__(self, q: np.ndarray, blank: int = 0):
        with np.errstate(divide="ignore"):
            self.lq = np.log(q)
        self.t_len = q.shape[0]
        self.blank = blank

    def initial(self) -> CtcPrefixState:
        r_b = np.cumsum(self.lq[:, self.blank])
        r_n = np.full(self.t_len, NEG_INF)
        return CtcPrefixState(r_n, r_b, 0.0, -1)

    def extend(self, state: CtcPrefixState, c: int) -> tuple[CtcPrefixState, float]:
        """Returns (state for prefix.c, incremental log prefix score)."""
        if c == self.blank:
            raise ValueError("CTC prefixes are blank-free")
        if state.log_prefix == NEG_INF:  # extending an impossible prefix
            return state, NEG_INF
        lq = self.lq
        t_len = self.t_len
        # phi[t]: prefix realized by frame t with the path allowed to emit c next
        phi = state.r_b.copy()
        if c != state.last:
            phi = np.logaddexp(phi, state.r_n)
        r_n = np.full(t_len, NEG_INF)
        r_b = np.full(t_len, NEG_INF)  # a length-1 path cannot both emit c and blank
        first = 0.0 if state.last == -1 else NEG_INF  # only the empty prefix is done at t=0
        r_n[0] = lq[0, c] + first
        emit = [r_n[0]]
        for t in range(1, t_len):
            gate = phi[t - 1]
            emit.append(lq[t, c] + gate)
            r_n[t] = np.logaddexp(r_n[t - 1], gate) + lq[t, c]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + lq[t, self.blank]
        log_prefix = float(lse_np(np.array(emit)))
        inc = log_prefix - state.log_prefix
        return CtcPrefixState(r_n, r_b, log_prefix, c), float(inc)

    def eos_score(self, state: CtcPrefixState) -> float:
        """log p(output == prefix exactly) - log p(prefix is a prefix)."""
        if state.log_prefix == NEG_INF:
            return NEG_INF
        if state.last == -1:
            exact = state.r_b[-1]  # all-blank path set
        else:
            exact = np.logaddexp(state.r_n[-1], state.r_b[-1])
        return float(exact - state.log_prefix)


def ctc_prefix_score(q: np.ndarray, prefix: list[int], nxt: int,
                     blank: int = 0) -> float:
    """Stateless incremental score: log p(prefix.nxt is a prefix | q) -
    log p(prefix is a prefix | q); -inf for infeasible prefixes."""
    scorer = CtcPrefixScorer(q, blank)
    state = scorer.initial()
    for c in prefix:
        state, _ = scorer.extend(state, c)
        if state.log_prefix == NEG_INF:
            return NEG_INF
    _, inc = scorer.extend(state, nxt)
    return inc


# ---------------------------------------------------------------------------
# beam search


@dataclass
class Hypothesis:
    ids: tuple[int, ...]  # emitted units; ends with eos iff finished
    att_logp: float
    lm_logp: float
    ctc_logp: float
    state: DecoderState
    lm_state: list | None
    ctc_state: CtcPrefixState | None
    finished: bool = False

    def total(self, config: DecodeConfig) -> float:
        return (self.att_logp + config.lm_weight * self.lm_logp
                + config.ctc_weight * self.ctc_logp)

    def ranked(self, config: DecodeConfig) -> float:
        return self.total(config) + config.length_penalty * len(self.ids)


def _expansion_ids(vocab_size: int, vocab: SubwordVocab) -> list[int]:
    # the decoder never proposes blank or a second sos
    return [i for i in range(vocab_size) if i not in (vocab.blank_id, vocab.sos_id)]


def beam_search(h: Tensor, params: dict[str, Tensor], att_config: AttentionConfig,
                vocab: SubwordVocab, config: DecodeConfig,
                lm: tuple[dict[str, Tensor], LmConfig] | None = None,
                ctc_posteriors: np.ndarray | None = None) -> list[Hypothesis]:
    """Ranked completed hypotheses (best first) for one encoded utterance."""
    t_len = h.shape[0]
    if t_len == 0:
        raise ValueError("beam_search: empty encoder output")
    vocab_size = params["att/emb"].shape[0]
    use_lm = lm is not None and config.lm_weight != 0.0
    use_ctc = ctc_posteriors is not None and config.ctc_weight != 0.0
    scorer = CtcPrefixScorer(ctc_posteriors, vocab.blank_id) if use_ctc else None
    hproj = nm.matmul(h, params["att/energy/wh"])
    expand_ids = _expansion_ids(vocab_size, vocab)
    max_len = max(1, int(config.max_len_ratio * t_len))
    eos = vocab.eos_id

    live = [Hypothesis((), 0.0, 0.0, 0.0, initial_state(t_len, att_config),
                       initial_lm_state(lm[1]) if use_lm else None,
                       scorer.initial() if use_ctc else None)]
    completed: list[Hypothesis] = []

    while live:
        candidates: list[Hypothesis] = []
        for hyp in live:
            y_prev = hyp.ids[-1] if hyp.ids else vocab.sos_id
            state, logp = step_scores(hyp.state, y_prev, h, params, att_config, hproj)
            att_vec = logp.data
            if use_lm:
                lm_state, lm_logp = lm_step(hyp.lm_state, y_prev, lm[0], lm[1])
                lm_vec = lm_logp.data
            for uid in expand_ids:
                att_logp = hyp.att_logp + float(att_vec[uid])
                lm_logp_new = hyp.lm_logp + (float(lm_vec[uid]) if use_lm else 0.0)
                if use_ctc:
                    if uid == eos:
                        ctc_state, inc = hyp.ctc_state, scorer.eos_score(hyp.ctc_state)
                    else:
                        ctc_state, inc = scorer.extend(hyp.ctc_state, uid)
                    ctc_logp_new = hyp.ctc_logp + inc
                else:
                    ctc_state, ctc_logp_new = None, 0.0
                candidates.append(Hypothesis(
                    hyp.ids + (uid,), att_logp, lm_logp_new, ctc_logp_new,
                    state, lm_state if use_lm else None, ctc_state,
                    finished=(uid == eos)))
        finished = [c for c in candidates if c.finished]
        completed.extend(finished)
        open_hyps = [c for c in candidates if not c.finished and len(c.ids) < max_len]
        open_hyps.sort(key=lambda c: c.total(config), reverse=True)
        live = open_hyps[:config.beam]
        if completed and live:
            # every score increment is <= 0, so total + penalty * max_len
            # bounds the ranked score of any descendant of a live hypothesis
            best_done = max(c.ranked(config) for c in completed)
            bound = config.length_penalty * max_len
            if all(c.total(config) + bound < best_done for c in live):
                break

    if not completed:
        # length cap hit before any eos: finalize the best open hypotheses
        completed = live or [Hypothesis((), 0.0, 0.0, 0.0,
                                        initial_state(t_len, att_config), None, None)]
    completed.sort(key=lambda c: (c.ranked(config), c.ids), reverse=True)
    return completed[:config.beam]


def greedy_decode(h: Tensor, params: dict[str, Tensor], att_config: AttentionConfig,
                  vocab: SubwordVocab, config: DecodeConfig,
                  lm=None, ctc_posteriors: np.ndarray | None = None) -> Hypothesis:
    """Pick the best single expansion at every step (beam search degenerates
    to this at beam = 1)."""
    best = beam_search(h, params, att_config, vocab,
                       replace(config, beam=1), lm, ctc_posteriors)
    return best[0]


def format_nbest(utterance_id: str, hyps: list[Hypothesis], vocab: SubwordVocab,
                 config: DecodeConfig) -> str:
    """One tab-separated line per hypothesis: id, rank, total, att, lm, ctc, text."""
    lines = []
    for rank, hyp in enumerate(hyps, 1):
        text = _decode_ids(hyp, vocab)
        lines.append(f"{utterance_id}\t{rank}\t{hyp.ranked(config):.6f}\t"
                     f"{hyp.att_logp:.6f}\t{hyp.lm_logp:.6f}\t{hyp.ctc_logp:.6f}\t{text}")
    return "\n".join(lines) + "\n"


def _decode_ids(hyp: Hypothesis, vocab: SubwordVocab) -> str:
    from .subword import decode
    return decode(list(hyp.ids), vocab)
