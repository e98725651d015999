import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctca.features import (
    FeatureConfig, ManifestRecord, SynthConfig, Waveform, frame_count,
    load_waveform, mel_bin_centers, mel_filterbank, read_manifest, read_wav,
    speed_perturb, synth_corpus, synth_waveform, word_list, write_manifest,
    write_wav,
)

CFG = FeatureConfig()


def sine(freq, rate=16000, seconds=1.0, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return Waveform(amp * np.sin(2 * np.pi * freq * t), rate)


def test_exactly_one_window_gives_one_frame():
    w = Waveform(np.zeros(400), 16000)  # 25 ms at 16 kHz
    assert mel_filterbank(w, CFG).frames.shape == (1, 80)


def test_too_short_rejected():
    with pytest.raises(ValueError, match="shorter"):
        mel_filterbank(Waveform(np.zeros(399), 16000), CFG)


def test_all_zero_wave_hits_log_floor():
    out = mel_filterbank(Waveform(np.zeros(1000), 16000), CFG).frames
    assert np.all(out == math.log(1e-10))


def test_pure_tone_peaks_at_nearest_mel_center():
    fs = mel_filterbank(sine(1000.0), CFG)
    centers = mel_bin_centers(16000, 80)
    expected_bin = int(np.abs(centers - 1000.0).argmin())
    assert int(fs.frames.mean(axis=0).argmax()) == expected_bin


def test_sign_flip_invariance():
    w = sine(700.0, seconds=0.3)
    a = mel_filterbank(w, CFG).frames
    b = mel_filterbank(Waveform(-w.samples, w.sample_rate), CFG).frames
    assert np.array_equal(a, b)


@given(st.integers(min_value=400, max_value=20000))
@settings(max_examples=100, deadline=None)
def test_frame_count_formula(n):
    w = Waveform(np.zeros(n), 16000)
    frames = mel_filterbank(w, CFG).frames
    assert frames.shape[0] == (n - 400) // 160 + 1 == frame_count(n, 400, 160)


def test_speed_identity():
    w = sine(440.0)
    out = speed_perturb(w, 1.0)
    assert np.array_equal(out.samples, w.samples)
    assert out.sample_rate == w.sample_rate


def test_speed_length_arithmetic():
    w = sine(440.0)
    assert speed_perturb(w, 0.9).samples.size == round(16000 / 0.9)


def test_speed_shifts_tone_frequency():
    out = speed_perturb(sine(440.0), 1.1)
    spec = np.abs(np.fft.rfft(out.samples))
    freqs = np.fft.rfftfreq(out.samples.size, 1 / 16000)
    bin_width = freqs[1]
    assert abs(freqs[spec.argmax()] - 484.0) <= bin_width


def test_speed_factor_range_enforced():
    w = sine(440.0)
    with pytest.raises(ValueError):
        speed_perturb(w, 0.4)
    with pytest.raises(ValueError):
        speed_perturb(w, 2.5)


@given(st.sampled_from([0.9, 1.1, 0.75, 1.4]), st.integers(2000, 30000))
@settings(max_examples=40, deadline=None)
def test_speed_round_trip_length(factor, n):
    w = Waveform(np.zeros(n), 16000)
    back = speed_perturb(speed_perturb(w, factor), 1.0 / factor)
    assert abs(back.samples.size - n) <= 1


def test_synth_deterministic():
    cfg = SynthConfig(vocab_size=3, n_train=6, n_dev=2, n_test=2)
    a = synth_corpus(cfg, 42)
    b = synth_corpus(cfg, 42)
    assert [(u.utterance_id, u.transcript, u.split) for u in a] == \
           [(u.utterance_id, u.transcript, u.split) for u in b]
    wa = synth_waveform(a[0].transcript, a[0].index, cfg, 42)
    wb = synth_waveform(b[0].transcript, b[0].index, cfg, 42)
    assert np.array_equal(wa.samples, wb.samples)


def test_synth_words_per_utterance_fixed_range():
    cfg = SynthConfig(vocab_size=4, n_train=10, n_dev=0, n_test=0,
                      words_min=3, words_max=3)
    for u in synth_corpus(cfg, 9):
        assert len(u.transcript.split()) == 3


def test_synth_vocab_capacity_rejected():
    with pytest.raises(ValueError, match="capacity"):
        word_list(51)


def test_clean_words_linearly_separable_by_mean_frame():
    # 1-nearest-neighbor on mean filterbank frames, noiseless corpus.
    cfg = SynthConfig(vocab_size=2, n_train=20, n_dev=0, n_test=10,
                      words_min=1, words_max=1, snr_db=None)
    utts = synth_corpus(cfg, 5)
    means = {}
    for u in utts:
        w = synth_waveform(u.transcript, u.index, cfg, 5)
        means[u.index] = mel_filterbank(w, CFG).frames.mean(axis=0)
    train = [(means[u.index], u.transcript) for u in utts if u.split == "train"]
    hits = 0
    tests = [u for u in utts if u.split == "test"]
    for u in tests:
        dists = [np.linalg.norm(means[u.index] - v) for v, _ in train]
        if train[int(np.argmin(dists))][1] == u.transcript:
            hits += 1
    assert hits == len(tests)


def test_wav_round_trip(tmp_path):
    w = sine(500.0, rate=8000, seconds=0.2)
    p = tmp_path / "t.wav"
    write_wav(p, w)
    back = read_wav(p)
    assert back.sample_rate == 8000
    assert np.max(np.abs(back.samples - w.samples)) < 1.0 / 32768


def test_wav_rejects_stereo_naming_format(tmp_path):
    import wave as wave_mod
    p = tmp_path / "stereo.wav"
    with wave_mod.open(str(p), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(8000)
        f.writeframes(b"\x00\x00\x00\x00" * 10)
    with pytest.raises(ValueError, match="2-channel"):
        read_wav(p)


def test_wav_rejects_8bit_naming_format(tmp_path):
    import wave as wave_mod
    p = tmp_path / "w8.wav"
    with wave_mod.open(str(p), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(1)
        f.setframerate(8000)
        f.writeframes(b"\x00" * 20)
    with pytest.raises(ValueError, match="8-bit"):
        read_wav(p)


def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord("u1", "synth", "badi bela"),
            ManifestRecord("u2", "/tmp/x.wav", "nolo")]
    p = tmp_path / "m.tsv"
    write_manifest(p, recs)
    assert read_manifest(p) == recs


def test_manifest_bad_line_rejected(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("only two\tfields\n")
    with pytest.raises(ValueError, match="3 tab-separated"):
        read_manifest(p)


def test_load_waveform_synth_and_file(tmp_path):
    cfg = SynthConfig(vocab_size=2, n_train=2, n_dev=0, n_test=0)
    utts = synth_corpus(cfg, 3)
    u = utts[0]
    direct = synth_waveform(u.transcript, u.index, cfg, 3)
    via_record = load_waveform(ManifestRecord(u.utterance_id, "synth", u.transcript),
                               cfg, 3)
    assert np.array_equal(direct.samples, via_record.samples)
    p = tmp_path / "u.wav"
    write_wav(p, direct)
    from_file = load_waveform(ManifestRecord(u.utterance_id, str(p), u.transcript),
                              None, 3)
    assert from_file.samples.size == direct.samples.size
    with pytest.raises(ValueError, match="synth config"):
        load_waveform(ManifestRecord("u0", "synth", "badi"), None, 3)
