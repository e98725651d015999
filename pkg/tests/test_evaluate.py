import functools
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctca.attention import AttentionConfig
from ctca.ctc import CtcBranchConfig
from ctca.encoder import EncoderConfig
from ctca.evaluate import (
    HarnessData, WerReport, alpha_sweep, evaluate_test_set, plot_csv, wer,
    write_ablation_csv, write_alpha_csv, ablation_grid,
)
from ctca.features import FeatureConfig, ManifestRecord, SynthConfig, synth_corpus
from ctca.model import ModelConfig
from ctca.search import DecodeConfig
from ctca.subword import bpe_train
from ctca.training import TrainConfig, prepare_dataset


def test_wer_identical():
    r = wer(["a", "b", "c"], ["a", "b", "c"])
    assert r.errors == 0 and r.wer == 0.0


def test_wer_one_substitution():
    r = wer("a b c".split(), "a x c".split())
    assert (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)
    assert r.wer == pytest.approx(1 / 3)


def test_wer_all_deleted():
    r = wer(["a", "b"], [])
    assert (r.substitutions, r.insertions, r.deletions) == (0, 0, 2)
    assert r.wer == 1.0


def test_wer_insertions():
    r = wer(["a"], ["a", "b", "c"])
    assert (r.substitutions, r.insertions, r.deletions) == (0, 2, 0)
    assert r.wer == 2.0


def test_wer_tie_prefers_substitution():
    # "a" -> "b" can be seen as sub, or del+ins; the tie-break picks sub
    r = wer(["a"], ["b"])
    assert (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)


def test_wer_empty_reference_rejected():
    with pytest.raises(ValueError, match="empty"):
        wer([], ["a"])


def naive_lev(a, b):
    @functools.lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
                   rec(i, j - 1) + 1,
                   rec(i - 1, j) + 1)
    return rec(len(a), len(b))


@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
       st.lists(st.sampled_from("abcd"), min_size=0, max_size=8))
@settings(max_examples=300, deadline=None)
def test_wer_total_matches_naive_recursive_oracle(ref, hyp):
    assert wer(ref, hyp).errors == naive_lev(tuple(ref), tuple(hyp))


@given(st.lists(st.sampled_from(["cat", "dog", "fox"]), min_size=1, max_size=6))
@settings(max_examples=100, deadline=None)
def test_wer_self_is_zero(words):
    assert wer(words, list(words)).wer == 0.0


def test_wer_report_aggregation():
    total = WerReport()
    total.add(wer("a b".split(), "a x".split()))
    total.add(wer("c".split(), "c d".split()))
    assert total.ref_words == 3
    assert total.errors == 2


# ---------------------------------------------------------------------------
# harnesses on a micro corpus (tiny model, few iterations: contract tests)

MICRO_MODEL = ModelConfig(
    encoder=EncoderConfig(cnn_layers=2, cnn_channels=4, bilstm_layers=1,
                          cells_per_direction=4, input_dim=80),
    attention=AttentionConfig(att_dim=4, loc_filters=2, loc_width=3,
                              dec_layers=1, dec_cells=4, embed_dim=3,
                              mode="smoothed"),
    ctc_branch=CtcBranchConfig(use_bilstm=True, cells=4),
)


def micro_data(seed=21):
    sc = SynthConfig(vocab_size=2, n_train=6, n_dev=2, n_test=2,
                     words_min=1, words_max=1, snr_db=None)
    utts = synth_corpus(sc, seed)
    by_split = {"train": [], "dev": [], "test": []}
    for u in utts:
        by_split[u.split].append(ManifestRecord(u.utterance_id, "synth", u.transcript))
    vocab = bpe_train([r.transcript for r in by_split["train"]], 6)
    fc = FeatureConfig()
    return HarnessData(
        train=prepare_dataset(by_split["train"], vocab, fc, sc, seed),
        dev=prepare_dataset(by_split["dev"], vocab, fc, sc, seed),
        test=prepare_dataset(by_split["test"], vocab, fc, sc, seed),
        vocab=vocab)


MICRO_TRAIN = TrainConfig(alpha=0.5, batch_size=4, iterations=3, val_interval=2)
MICRO_DECODE = DecodeConfig(beam=3, lm_weight=0.0, max_len_ratio=0.8,
                            length_penalty=0.6)


def test_alpha_sweep_shape_and_determinism(tmp_path):
    data = micro_data()
    rows1 = alpha_sweep(data, MICRO_MODEL, MICRO_TRAIN, MICRO_DECODE,
                        [0.0, 0.5, 1.0], seed=5)
    rows2 = alpha_sweep(data, MICRO_MODEL, MICRO_TRAIN, MICRO_DECODE,
                        [0.0, 0.5, 1.0], seed=5)
    assert rows1 == rows2
    assert [a for a, _ in rows1] == [0.0, 0.5, 1.0]
    assert all(np.isfinite(w) for _, w in rows1)
    p = tmp_path / "alpha.csv"
    write_alpha_csv(p, rows1)
    lines = p.read_text().strip().split("\n")
    assert lines[0] == "alpha,wer" and len(lines) == 4


def test_alpha_sweep_rejects_out_of_range():
    data = micro_data()
    with pytest.raises(ValueError, match="alphas"):
        alpha_sweep(data, MICRO_MODEL, MICRO_TRAIN, MICRO_DECODE, [0.5, 1.2], seed=5)


def test_ablation_grid_shape(tmp_path):
    data = micro_data()
    rows = ablation_grid(data, MICRO_MODEL, MICRO_TRAIN, MICRO_DECODE,
                         depths=[1, 2], seed=5)
    assert len(rows) == 4  # 2 depths x branch on/off
    assert {(d, b) for d, b, _, _ in rows} == \
        {(1, "ctc-bilstm"), (1, "plain"), (2, "ctc-bilstm"), (2, "plain")}
    assert all(np.isfinite(w0) and np.isfinite(w1) for _, _, w0, w1 in rows)
    p = tmp_path / "ablation.csv"
    write_ablation_csv(p, rows)
    lines = p.read_text().strip().split("\n")
    assert lines[0] == "depth,branch,wer_no_lm,wer_lm" and len(lines) == 5


def test_nbest_sink_receives_lines():
    data = micro_data()
    from ctca.model import build_model_params
    params = build_model_params(MICRO_MODEL, data.vocab.size, seed=5)
    sink = io.StringIO()
    report = evaluate_test_set(data.test, params, MICRO_MODEL, data.vocab,
                               MICRO_DECODE, nbest_sink=sink)
    lines = sink.getvalue().strip().split("\n")
    assert len(lines) == len(data.test) * MICRO_DECODE.beam
    assert report.ref_words == sum(len(u.transcript.split()) for u in data.test)


def test_plot_csv_outputs_svg(tmp_path):
    alpha_csv = tmp_path / "alpha.csv"
    write_alpha_csv(alpha_csv, [(0.0, 0.5), (0.5, 0.2), (1.0, 0.4)])
    out = tmp_path / "alpha.svg"
    plot_csv(alpha_csv, out)
    assert out.read_text().lstrip().startswith("<?xml")

    metrics_csv = tmp_path / "metrics.csv"
    metrics_csv.write_text("iteration,train_loss,train_acc,val_acc,epsilon\n"
                           "1,2.0,0.1,,1e-08\n2,1.5,0.3,0.25,1e-08\n")
    out2 = tmp_path / "metrics.svg"
    plot_csv(metrics_csv, out2)
    assert out2.read_text().lstrip().startswith("<?xml")


def test_plot_csv_rejects_unknown_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        plot_csv(bad, tmp_path / "bad.svg")
