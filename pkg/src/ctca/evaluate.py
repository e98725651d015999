"""Scoring and experiment harnesses: word error rate via Levenshtein
alignment, the encoder-depth / CTC-branch ablation grid, and the alpha sweep
over the joint-loss interpolation weight.

WER counts substitutions, insertions and deletions under a minimum-edit
alignment of whitespace words (hypotheses are compared after BPE decoding,
not on subword units). Traceback ties prefer substitution over insertion
over deletion so the S/I/D split is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import AttentionConfig
from .ctc import greedy_collapse
from .encoder import EncoderConfig
from .lm import LmConfig, LmTrainConfig, lm_train
from .model import ModelConfig, encoder_posteriors
from .numerics import Tensor
from .search import DecodeConfig, Hypothesis, beam_search, format_nbest
from .subword import SubwordVocab, decode as bpe_decode
from .training import (PreparedUtterance, TrainConfig, TrainResult, train)


@dataclass
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / self.ref_words

    def add(self, other: "WerReport") -> None:
        self.substitutions += other.substitutions
        self.insertions += other.insertions
        self.deletions += other.deletions
        self.ref_words += other.ref_words


def wer(reference: list[str], hypothesis: list[str]) -> WerReport:
    """Minimum-edit alignment with unit costs; ties in the traceback prefer
    substitution, then insertion, then deletion."""
    if not reference:
        raise ValueError("wer: empty reference")
    n, m = len(reference), len(hypothesis)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            ins = cost[i, j - 1] + 1
            dele = cost[i - 1, j] + 1
            cost[i, j] = min(sub, ins, dele)
    report = WerReport(ref_words=n)
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + \
                (reference[i - 1] != hypothesis[j - 1]):
            if reference[i - 1] != hypothesis[j - 1]:
                report.substitutions += 1
            i, j = i - 1, j - 1
        elif j > 0 and cost[i, j] == cost[i, j - 1] + 1:
            report.insertions += 1
            j -= 1
        else:
            report.deletions += 1
            i -= 1
    return report


# ---------------------------------------------------------------------------
# decoding a prepared test set


def decode_utterance(utt: PreparedUtterance, params, model_config: ModelConfig,
                     vocab: SubwordVocab, config: DecodeConfig,
                     lm=None, mode: str = "beam") -> tuple[str, list[Hypothesis]]:
    """Returns (best transcript, ranked hypotheses; empty for ctc-greedy)."""
    h, q = encoder_posteriors(utt.feats, params, model_config)
    if mode == "ctc-greedy":
        ids = greedy_collapse(q, blank=vocab.blank_id)
        return bpe_decode(ids, vocab), []
    if mode != "beam":
        raise ValueError(f"unknown decode mode {mode!r}")
    hyps = beam_search(h, params, model_config.attention, vocab, config,
                       lm=lm, ctc_posteriors=q if config.ctc_weight > 0 else None)
    return bpe_decode(list(hyps[0].ids), vocab), hyps


def evaluate_test_set(test_data: list[PreparedUtterance], params,
                      model_config: ModelConfig, vocab: SubwordVocab,
                      config: DecodeConfig, lm=None, mode: str = "beam",
                      nbest_sink=None) -> WerReport:
    total = WerReport()
    for utt in test_data:
        text, hyps = decode_utterance(utt, params, model_config, vocab, config,
                                      lm=lm, mode=mode)
        total.add(wer(utt.transcript.split(), text.split()))
        if nbest_sink is not None and hyps:
            nbest_sink.write(format_nbest(utt.utterance_id, hyps, vocab, config))
    return total


# ---------------------------------------------------------------------------
# harnesses


@dataclass
class HarnessData:
    train: list[PreparedUtterance]
    dev: list[PreparedUtterance]
    test: list[PreparedUtterance]
    vocab: SubwordVocab


def alpha_sweep(data: HarnessData, model_config: ModelConfig,
                train_config: TrainConfig, decode_config: DecodeConfig,
                alphas: list[float], seed: int,
                log=lambda msg: None) -> list[tuple[float, float]]:
    """One model per alpha, identical seeds and schedules; pure-CTC models
    (alpha = 1) decode by greedy collapse, the rest by beam search."""
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    rows = []
    for alpha in alphas:
        cfg = replace(train_config, alpha=alpha)
        result = train(data.train, data.dev, data.vocab, model_config, cfg, seed)
        mode = "ctc-greedy" if alpha == 1.0 else "beam"
        report = evaluate_test_set(data.test, result.params, model_config,
                                   data.vocab, decode_config, mode=mode)
        rows.append((alpha, report.wer))
        log(f"alpha={alpha}: wer={report.wer:.4f}")
    return rows


def ablation_grid(data: HarnessData, model_config: ModelConfig,
                  train_config: TrainConfig, decode_config: DecodeConfig,
                  depths: list[int], seed: int,
                  lm_config: LmConfig | None = None,
                  lm_train_config: LmTrainConfig | None = None,
                  log=lambda msg: None) -> list[tuple[int, str, float, float]]:
    """Encoder depth x CTC-branch grid; each cell reports WER without and
    with shallow LM fusion (LM trained once on the training transcripts)."""
    lm_config = lm_config or LmConfig()
    lm_train_config = lm_train_config or LmTrainConfig(epochs=5)
    corpus = sorted({u.transcript for u in data.train})
    lm_params, _ = lm_train(corpus, data.vocab, lm_config, lm_train_config, seed)
    rows = []
    for depth in depths:
        for branch in (True, False):
            mc = ModelConfig(
                encoder=replace(model_config.encoder, bilstm_layers=depth),
                attention=model_config.attention,
                ctc_branch=replace(model_config.ctc_branch, use_bilstm=branch))
            result = train(data.train, data.dev, data.vocab, mc, train_config, seed)
            no_lm = evaluate_test_set(data.test, result.params, mc, data.vocab,
                                      replace(decode_config, lm_weight=0.0))
            with_lm = evaluate_test_set(data.test, result.params, mc, data.vocab,
                                        decode_config, lm=(lm_params, lm_config))
            tag = "ctc-bilstm" if branch else "plain"
            rows.append((depth, tag, no_lm.wer, with_lm.wer))
            log(f"depth={depth} branch={tag}: "
                f"wer={no_lm.wer:.4f} / {with_lm.wer:.4f} (with LM)")
    return rows


def write_alpha_csv(path, rows: list[tuple[float, float]]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("alpha,wer\n")
        for alpha, w in rows:
            f.write(f"{alpha},{w:.6f}\n")
    tmp.replace(path)


def write_ablation_csv(path, rows: list[tuple[int, str, float, float]]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("depth,branch,wer_no_lm,wer_lm\n")
        for depth, branch, w0, w1 in rows:
            f.write(f"{depth},{branch},{w0:.6f},{w1:.6f}\n")
    tmp.replace(path)


# ---------------------------------------------------------------------------
# plotting (metrics and sweep CSVs -> SVG line charts)


def plot_csv(csv_path, out_path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        rows = [line.strip().split(",") for line in f if line.strip()]

    fig, ax = plt.subplots(figsize=(6, 4))
    if header[:2] == ["alpha", "wer"]:
        xs = [float(r[0]) for r in rows]
        ys = [float(r[1]) for r in rows]
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("alpha")
        ax.set_ylabel("WER")
    elif header[0] == "iteration":
        xs = [int(r[0]) for r in rows]
        for col, label in ((1, "train_loss"), (2, "train_acc"), (3, "val_acc")):
            pts = [(x, float(r[col])) for x, r in zip(xs, rows) if r[col] != ""]
            if pts and col != 1:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("accuracy")
        ax.legend()
    else:
        raise ValueError(f"{csv_path}: unrecognized CSV header {header}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    tmp = Path(str(out_path) + ".tmp")
    fig.savefig(tmp, format="svg")
    plt.close(fig)
    tmp.replace(out_path)
