"""Byte-pair-encoding subword vocabulary: training, encoding, decoding.

Conventions (fixed so every oracle trace is unambiguous):

* words are split into characters, with the word-start marker "▁" fused
  onto the first character ("low" -> ["▁l", "o", "w"]); decoding is then a
  pure concatenation with "▁" -> space;
* the most frequent adjacent pair is merged each round; ties break by
  lexicographic order of the (left, right) strings; training stops early
  when no pair occurs at least twice;
* ids: 0=<blank>, 1=<sos>, 2=<eos>, 3=<unk>, then base units sorted,
  then merged units in merge order. Specials are never produced by merges
  and never emitted by encoding.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

MARKER = "▁"

BLANK, SOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ["<blank>", "<sos>", "<eos>", "<unk>"]


@dataclass
class SubwordVocab:
    merges: list[tuple[str, str]]
    units: list[str]  # id-ordered, specials first

    def __post_init__(self):
        self.unit_to_id = {u: i for i, u in enumerate(self.units)}
        self.merge_rank = {pair: r for r, pair in enumerate(self.merges)}

    @property
    def size(self) -> int:
        return len(self.units)

    @property
    def blank_id(self) -> int:
        return BLANK

    @property
    def sos_id(self) -> int:
        return SOS

    @property
    def eos_id(self) -> int:
        return EOS

    @property
    def unk_id(self) -> int:
        return UNK


def _split_word(word: str) -> list[str]:
    return [MARKER + word[0]] + list(word[1:])


def _merge_symbols(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_train(corpus: list[str], num_merges: int) -> SubwordVocab:
    """Learn `num_merges` merges (early stop when no pair occurs twice)."""
    if not corpus or not any(line.split() for line in corpus):
        raise ValueError("bpe_train: empty corpus")
    if num_merges < 0:
        raise ValueError(f"bpe_train: num_merges must be >= 0, got {num_merges}")

    word_freq = Counter()
    for line in corpus:
        word_freq.update(line.split())
    words = {w: _split_word(w) for w in word_freq}

    base_units = sorted({s for symbols in words.values() for s in symbols})
    merges: list[tuple[str, str]] = []
    merged_units: list[str] = []

    for _ in range(num_merges):
        pair_freq = Counter()
        for w, symbols in words.items():
            f = word_freq[w]
            for a, b in zip(symbols, symbols[1:]):
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        best_count = max(pair_freq.values())
        if best_count < 2:
            break
        best = min(p for p, c in pair_freq.items() if c == best_count)
        merges.append(best)
        merged_units.append(best[0] + best[1])
        for w in words:
            words[w] = _merge_symbols(words[w], best)

    return SubwordVocab(merges, SPECIALS + base_units + merged_units)


def _encode_word(word: str, vocab: SubwordVocab) -> list[int]:
    # Unknown characters become <unk> sentinels, which never merge.
    symbols = [s if s in vocab.unit_to_id else None for s in _split_word(word)]
    while True:
        best_rank, best_pair = None, None
        for a, b in zip(symbols, symbols[1:]):
            if a is None or b is None:
                continue
            rank = vocab.merge_rank.get((a, b))
            if rank is not None and (best_rank is None or rank < best_rank):
                best_rank, best_pair = rank, (a, b)
        if best_pair is None:
            break
        merged = []
        i = 0
        while i < len(symbols):
            if (i + 1 < len(symbols)
                    and (symbols[i], symbols[i + 1]) == best_pair):
                merged.append(symbols[i] + symbols[i + 1])
                i += 2
            else:
                merged.append(symbols[i])
                i += 1
        symbols = merged
    return [UNK if s is None else vocab.unit_to_id[s] for s in symbols]


def encode(text: str, vocab: SubwordVocab) -> list[int]:
    ids: list[int] = []
    for word in text.split():
        ids.extend(_encode_word(word, vocab))
    return ids


def decode(ids: list[int], vocab: SubwordVocab) -> str:
    """Concatenate unit strings; markers become spaces; text stops at <eos>;
    other specials are stripped."""
    pieces = []
    for i in ids:
        if not (0 <= i < len(vocab.units)):
            raise ValueError(f"decode: unit id {i} out of range for vocab of "
                             f"{len(vocab.units)} units")
        if i == EOS:
            break
        if i in (BLANK, SOS, UNK):
            continue
        pieces.append(vocab.units[i])
    return "".join(pieces).replace(MARKER, " ").strip()


# ---------------------------------------------------------------------------
# vocab file: "bpe-vocab v1", merges "left<TAB>right", then "#units" section


def save_vocab(path, vocab: SubwordVocab) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("bpe-vocab v1\n")
        for left, right in vocab.merges:
            f.write(f"{left}\t{right}\n")
        f.write("#units\n")
        for u in vocab.units:
            f.write(u + "\n")
    tmp.replace(path)


def load_vocab(path) -> SubwordVocab:
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if not lines or lines[0] != "bpe-vocab v1":
        raise ValueError(f"{path}: missing 'bpe-vocab v1' header")
    merges = []
    i = 1
    while i < len(lines) and lines[i] != "#units":
        if lines[i]:
            left, right = lines[i].split("\t")
            merges.append((left, right))
        i += 1
    if i == len(lines):
        raise ValueError(f"{path}: missing '#units' section")
    units = [u for u in lines[i + 1:] if u]
    if units[:4] != SPECIALS:
        raise ValueError(f"{path}: first four units must be {SPECIALS}")
    return SubwordVocab(merges, units)
