"""CTC branch: dedicated BiLSTM + projection to per-frame unit posteriors,
the CTC loss via the forward algorithm, a literal path-enumeration oracle,
and greedy collapse decoding.

A CTC path is a frame-length sequence over units-plus-blank; it maps to a
label sequence by collapsing adjacent repeats and then removing blanks. The
loss is -log of the total probability of all paths mapping to the labels,
computed in log space over the blank-interleaved label sequence (probability
space underflows at modest sequence lengths).

An alignment is infeasible when T' < len(labels) + number of adjacent label
repeats. That is a reportable outcome (+inf loss), not an error: aggressive
downsampling can produce it legitimately and training must skip the sample.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .encoder import bilstm_layer, init_lstm_block, uniform_tensor
from .numerics import Tensor, lse_np
from .rng import Pcg32

BLANK = 0

NEG_INF = -np.inf


@dataclass
class CtcBranchConfig:
    use_bilstm: bool = True  # off reproduces the plain shared-encoder->FC layout
    cells: int = 64


def init_ctc_params(config: CtcBranchConfig, encoder_dim: int, vocab_size: int,
                    rng: Pcg32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    fc_in = encoder_dim
    if config.use_bilstm:
        for d in ("f", "b"):
            params.update(init_lstm_block(rng, encoder_dim, config.cells,
                                          f"ctc/rnn/{d}"))
        fc_in = 2 * config.cells
    params["ctc/fc/w"] = uniform_tensor(rng, (fc_in, vocab_size))
    params["ctc/fc/b"] = uniform_tensor(rng, (vocab_size,))
    return params


def ctc_branch_forward(h: Tensor, params: dict[str, Tensor],
                       config: CtcBranchConfig) -> Tensor:
    """Encoded (T', D) -> row-stochastic posteriors (T', V), blank included."""
    x = bilstm_layer(h, params, "ctc/rnn") if config.use_bilstm else h
    logits = nm.add(nm.matmul(x, params["ctc/fc/w"]), params["ctc/fc/b"])
    return nm.softmax(logits)


def collapse(path, blank: int = BLANK) -> list[int]:
    """Remove adjacent repeats, then blanks."""
    out = []
    prev = None
    for c in path:
        if c != prev:
            if c != blank:
                out.append(c)
            prev = c
    return out


def greedy_collapse(q: np.ndarray, blank: int = BLANK) -> list[int]:
    return collapse(np.argmax(q, axis=1).tolist(), blank)


def ctc_path_prob(q: np.ndarray, path) -> float:
    if len(path) != q.shape[0]:
        raise ValueError(f"path length {len(path)} != number of frames {q.shape[0]}")
    return float(np.prod(q[np.arange(q.shape[0]), path]))


def ctc_feasible(t_len: int, labels) -> bool:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return t_len >= len(labels) + repeats


def _extended(labels, blank: int) -> np.ndarray:
    ext = [blank]
    for y in labels:
        ext.append(y)
        ext.append(blank)
    return np.array(ext, dtype=np.int64)


def _forward_alphas(lq: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Log forward variables over the blank-interleaved labels, (T, S)."""
    t_len, s_len = lq.shape[0], ext.size
    # the skip transition s-2 -> s is allowed only into a non-blank position
    # whose label differs from the one two slots back
    can_skip = np.array(
        [s >= 2 and ext[s] != _blank_of(ext) and ext[s] != ext[s - 2]
         for s in range(s_len)])
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lq[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = lq[0, ext[1]]
    pad2 = np.array([NEG_INF, NEG_INF])
    for t in range(1, t_len):
        stay = alpha[t - 1]
        step = np.concatenate([pad2[:1], alpha[t - 1]])[:s_len]
        skip = np.where(can_skip, np.concatenate([pad2, alpha[t - 1]])[:s_len], NEG_INF)
        alpha[t] = lq[t, ext] + lse_np(np.stack([stay, step, skip]), axis=0)
    return alpha


def _blank_of(ext: np.ndarray) -> int:
    return int(ext[0])


def _backward_betas(lq: np.ndarray, ext: np.ndarray) -> np.ndarray:
    t_len, s_len = lq.shape[0], ext.size
    blank = _blank_of(ext)
    can_skip_to = np.array(
        [s + 2 < s_len and ext[s + 2] != blank and ext[s + 2] != ext[s]
         for s in range(s_len)])
    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = lq[t_len - 1, ext[s_len - 1]]
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = lq[t_len - 1, ext[s_len - 2]]
    pad2 = np.array([NEG_INF, NEG_INF])
    for t in range(t_len - 2, -1, -1):
        stay = beta[t + 1]
        step = np.concatenate([beta[t + 1], pad2])[1:s_len + 1]
        skip = np.where(can_skip_to,
                        np.concatenate([beta[t + 1], pad2])[2:s_len + 2], NEG_INF)
        beta[t] = lq[t, ext] + lse_np(np.stack([stay, step, skip]), axis=0)
    return beta


def ctc_loss_np(q: np.ndarray, labels, blank: int = BLANK) -> float:
    """-log p(labels | q) by the forward algorithm; +inf when infeasible."""
    labels = list(labels)
    if blank in labels:
        raise ValueError("labels must not contain blank")
    if not ctc_feasible(q.shape[0], labels):
        return math.inf
    lq = np.log(q)
    ext = _extended(labels, blank)
    alpha = _forward_alphas(lq, ext)
    s_len = ext.size
    tail = alpha[-1, -1] if s_len == 1 else lse_np(alpha[-1, -2:], axis=0)
    return float(-tail)


def ctc_loss_node(q: Tensor, labels, blank: int = BLANK) -> Tensor:
    """Graph node for the CTC loss on posteriors `q` (T', V).

    Infeasible alignments yield a constant +inf tensor (no gradient), which
    callers detect with math.isinf and skip."""
    labels = list(labels)
    if blank in labels:
        raise ValueError("labels must not contain blank")
    qd = q.data
    if not ctc_feasible(qd.shape[0], labels):
        return Tensor(np.asarray(math.inf))
    lq = np.log(qd)
    ext = _extended(labels, blank)
    alpha = _forward_alphas(lq, ext)
    s_len = ext.size
    logp = float(alpha[-1, -1] if s_len == 1 else lse_np(alpha[-1, -2:], axis=0))

    def bw(g):
        if not q.requires_grad:
            return
        beta = _backward_betas(lq, ext)
        ab = alpha + beta  # (T, S); both sides include the frame-t emission
        t_len, v = qd.shape
        occ = np.full((t_len, v), NEG_INF)
        for k in range(v):
            cols = np.nonzero(ext == k)[0]
            if cols.size:
                occ[:, k] = lse_np(ab[:, cols], axis=1)
        dq = -np.exp(occ - logp - 2.0 * lq)
        nm._accum(q, float(g) * dq)

    return Tensor(np.asarray(-logp), requires_grad=q.requires_grad,
                  op="ctc_loss", parents=(q,), bw=bw)


def ctc_brute_force(q: np.ndarray, labels, blank: int = BLANK) -> float:
    """-log of the label likelihood with the path set enumerated literally."""
    t_len, v = q.shape
    if v ** t_len > 10**7:
        raise ValueError(f"brute force limited to V^T <= 1e7, got {v}^{t_len}")
    labels = list(labels)
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        if collapse(path, blank) == labels:
            total += ctc_path_prob(q, path)
    return -math.log(total) if total > 0.0 else math.inf


# ---------------------------------------------------------------------------
# posterior dump: text header "ctc-post v1", then T' V, then T' rows of V floats


def save_posteriors(path, q: np.ndarray) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("ctc-post v1\n")
        f.write(f"{q.shape[0]} {q.shape[1]}\n")
        for row in q:
            f.write(" ".join(f"{x:.17g}" for x in row) + "\n")
    tmp.replace(path)


def load_posteriors(path) -> np.ndarray:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != "ctc-post v1":
            raise ValueError(f"{path}: missing 'ctc-post v1' header")
        t_len, v = map(int, f.readline().split())
        rows = [list(map(float, f.readline().split())) for _ in range(t_len)]
    q = np.array(rows)
    if q.shape != (t_len, v):
        raise ValueError(f"{path}: expected {t_len}x{v} posteriors, got {q.shape}")
    return q
