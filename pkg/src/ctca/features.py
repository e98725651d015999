"""Waveform handling: log-mel filterbank features, speed perturbation, WAV
ingestion and the synthetic desk-scale corpus.

The filterbank pipeline is fully self-contained and documented here so its
oracle tests are computable by hand:

  pre-emphasis 0.97 -> 25 ms Hamming windows every 10 ms -> magnitude FFT
  (size = next power of two >= window) -> triangular mel filters with unit
  peak, spanning 0 Hz .. rate/2 on the scale mel(f) = 2595*log10(1 + f/700)
  -> log with floor 1e-10.

Frame count is floor((num_samples - window) / hop) + 1.
"""

from __future__ import annotations

import math
import struct
import wave as wave_mod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Pcg32, STREAM_CORPUS


@dataclass
class Waveform:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (num_frames, n_mels)
    utterance_id: str = ""
    transcript: str = ""


@dataclass
class FeatureConfig:
    n_mels: int = 80
    window_ms: float = 25.0
    hop_ms: float = 10.0
    preemphasis: float = 0.97
    log_floor: float = 1e-10
    speed_factors: tuple = (0.9, 1.0, 1.1)
    augment: bool = False  # apply 3-fold speed perturbation to training data


def frame_count(num_samples: int, window: int, hop: int) -> int:
    return (num_samples - window) // hop + 1


def mel_scale(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_inverse(mel):
    return 700.0 * (np.power(10.0, np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_bin_centers(sample_rate: int, n_mels: int) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    pts = np.linspace(mel_scale(0.0), mel_scale(sample_rate / 2.0), n_mels + 2)
    return mel_inverse(pts)[1:-1]


def _mel_bank(sample_rate: int, nfft: int, n_mels: int) -> np.ndarray:
    """(n_mels, nfft//2 + 1) unit-peak triangular filters on the mel scale."""
    pts_hz = mel_inverse(np.linspace(mel_scale(0.0), mel_scale(sample_rate / 2.0),
                                     n_mels + 2))
    bin_hz = np.arange(nfft // 2 + 1) * (sample_rate / nfft)
    bank = np.zeros((n_mels, bin_hz.size))
    for j in range(n_mels):
        lo, mid, hi = pts_hz[j], pts_hz[j + 1], pts_hz[j + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        bank[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def mel_filterbank(wave: Waveform, config: FeatureConfig,
                   utterance_id: str = "", transcript: str = "") -> FeatureSequence:
    """Log-mel energies, (num_frames, n_mels)."""
    window = int(round(config.window_ms / 1000.0 * wave.sample_rate))
    hop = int(round(config.hop_ms / 1000.0 * wave.sample_rate))
    x = wave.samples
    if x.size < window:
        raise ValueError(
            f"waveform of {x.size} samples is shorter than one {window}-sample window")
    n_frames = frame_count(x.size, window, hop)

    emph = np.empty_like(x)
    emph[0] = x[0]
    emph[1:] = x[1:] - config.preemphasis * x[:-1]

    nfft = 1
    while nfft < window:
        nfft *= 2
    ham = np.hamming(window)
    bank = _mel_bank(wave.sample_rate, nfft, config.n_mels)

    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = emph[idx] * ham
    mag = np.abs(np.fft.rfft(frames, n=nfft, axis=1))
    energies = mag @ bank.T
    out = np.log(np.maximum(energies, config.log_floor))
    return FeatureSequence(out, utterance_id=utterance_id, transcript=transcript)


def speed_perturb(wave: Waveform, factor: float) -> Waveform:
    """Resample so duration scales by 1/factor (linear interpolation);
    the nominal sample rate is unchanged."""
    if not (0.5 <= factor <= 2.0):
        raise ValueError(f"speed factor {factor} outside [0.5, 2.0]")
    x = wave.samples
    if factor == 1.0:
        return Waveform(x.copy(), wave.sample_rate)
    m = int(round(x.size / factor))
    pos = np.arange(m) * factor
    out = np.interp(pos, np.arange(x.size), x)
    return Waveform(out, wave.sample_rate)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM, 16-bit signed little-endian, mono)


def read_wav(path) -> Waveform:
    with wave_mod.open(str(path), "rb") as f:
        comptype = f.getcomptype()
        if comptype != "NONE":
            raise ValueError(f"{path}: unsupported WAV encoding {comptype!r}; "
                             "expected uncompressed PCM")
        width = f.getsampwidth()
        channels = f.getnchannels()
        if width != 2 or channels != 1:
            raise ValueError(
                f"{path}: found {8 * width}-bit {channels}-channel PCM; "
                "expected 16-bit mono")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    ints = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(ints / 32768.0, rate)


def write_wav(path, wave: Waveform) -> None:
    clipped = np.clip(wave.samples, -1.0, 1.0)
    ints = np.round(clipped * 32767.0).astype("<i2")
    with wave_mod.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave.sample_rate)
        f.writeframes(ints.tobytes())


# ---------------------------------------------------------------------------
# synthetic corpus

# Words are two CV syllables; audio pattern i is a fixed chord of three tones.
_SYLLABLES = [c + v for c in "bdgklmnprst" for v in "aeiou"]
_TONE_GRID = np.array([320.0, 470.0, 620.0, 790.0, 980.0, 1190.0, 1420.0,
                       1670.0, 1940.0, 2230.0])
MAX_WORDS = 50


@dataclass
class SynthConfig:
    vocab_size: int = 5
    n_train: int = 200
    n_dev: int = 20
    n_test: int = 40
    words_min: int = 1
    words_max: int = 3
    sample_rate: int = 8000
    snr_db: float | None = 30.0  # None = noiseless
    gap_ms: float = 50.0


@dataclass
class SynthUtterance:
    utterance_id: str
    index: int
    split: str
    transcript: str


def word_list(k: int) -> list[str]:
    if k > MAX_WORDS:
        raise ValueError(f"vocab_size {k} exceeds distinct-pattern capacity {MAX_WORDS}")
    words = []
    n = len(_SYLLABLES)
    for i in range(k):
        words.append(_SYLLABLES[i % n] + _SYLLABLES[(i * 13 + 7) % n])
    if len(set(words)) != k:
        raise ValueError("word list collision; reduce vocab_size")
    return words


def _word_tones(i: int) -> list[float]:
    g = _TONE_GRID
    return [g[i % 10], g[(i // 10 + i + 3) % 10], g[(i * 7 + 1) % 10]]


def _word_duration_s(i: int) -> float:
    return 0.150 + 0.150 * ((i * 3) % 7) / 6.0


def _render_word(i: int, rate: int) -> np.ndarray:
    n = int(round(_word_duration_s(i) * rate))
    t = np.arange(n) / rate
    sig = np.zeros(n)
    for j, f in enumerate(_word_tones(i)):
        sig += np.sin(2.0 * np.pi * f * t) / (j + 1.5)
    ramp = int(0.010 * rate)
    env = np.ones(n)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[-ramp:] = np.linspace(1.0, 0.0, ramp)
    return 0.25 * sig * env


def synth_waveform(transcript: str, index: int, config: SynthConfig,
                   seed: int) -> Waveform:
    """Deterministic audio for one utterance; the noise stream is keyed by
    (seed, utterance index) so any record can be regenerated in isolation."""
    words = word_list(config.vocab_size)
    w2i = {w: i for i, w in enumerate(words)}
    rate = config.sample_rate
    gap = np.zeros(int(round(config.gap_ms / 1000.0 * rate)))
    pieces = [gap]
    for w in transcript.split():
        pieces.append(_render_word(w2i[w], rate))
        pieces.append(gap)
    sig = np.concatenate(pieces)
    if config.snr_db is not None:
        rms = math.sqrt(float(np.mean(sig**2))) or 1e-3
        noise_std = rms / (10.0 ** (config.snr_db / 20.0))
        rng = Pcg32(seed, STREAM_CORPUS * 1000 + index)
        noise = np.array([rng.normal() for _ in range(sig.size)])
        sig = sig + noise_std * noise
    return Waveform(np.clip(sig, -1.0, 1.0), rate)


def synth_corpus(config: SynthConfig, seed: int) -> list[SynthUtterance]:
    """Draw transcripts for train/dev/test; audio comes from synth_waveform."""
    words = word_list(config.vocab_size)
    total = config.n_train + config.n_dev + config.n_test
    utts = []
    for index in range(total):
        rng = Pcg32(seed, STREAM_CORPUS * 1000 + index)
        n_words = rng.randint(config.words_min, config.words_max)
        text = " ".join(words[rng.randint(0, len(words) - 1)] for _ in range(n_words))
        if index < config.n_train:
            split = "train"
        elif index < config.n_train + config.n_dev:
            split = "dev"
        else:
            split = "test"
        utts.append(SynthUtterance(f"u{index:05d}", index, split, text))
    return utts


# ---------------------------------------------------------------------------
# manifests: one record per line, tab-separated: id, path-or-"synth", transcript


@dataclass
class ManifestRecord:
    utterance_id: str
    path: str  # filesystem path or the literal "synth"
    transcript: str


def write_manifest(path, records: list[ManifestRecord]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for r in records:
            f.write(f"{r.utterance_id}\t{r.path}\t{r.transcript}\n")
    tmp.replace(path)


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, "
                                 f"got {len(parts)}")
            records.append(ManifestRecord(*parts))
    return records


def load_waveform(record: ManifestRecord, synth_config: SynthConfig | None,
                  seed: int) -> Waveform:
    """Resolve a manifest record to audio: read the WAV or regenerate."""
    if record.path == "synth":
        if synth_config is None:
            raise ValueError(f"{record.utterance_id}: manifest says 'synth' but no "
                             "synth config was provided")
        index = int(record.utterance_id.lstrip("u").split("-")[0])
        return synth_waveform(record.transcript, index, synth_config, seed)
    return read_wav(record.path)
