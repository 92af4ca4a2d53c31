"""Text normalization, byte-pair-encoding subwords, and the shared vocabulary."""
from __future__ import annotations

import collections
import re
import unicodedata
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, InputError

EOW = "</w>"
PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, UNK)

_SPACE = re.compile(r"\s+")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def normalize_text(s: str | bytes) -> str:
    """Lowercase, split punctuation into separate tokens, collapse whitespace."""
    if isinstance(s, bytes):
        try:
            s = s.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InputError(f"invalid UTF-8: {exc}") from exc
    s = "".join(f" {c} " if _is_punct(c) else c for c in s.lower())
    return _SPACE.sub(" ", s).strip()


class BpeModel:
    """Ordered merge list. Word-final subwords carry the ``</w>`` suffix."""

    def __init__(self, merges: Sequence[tuple[str, str]]):
        self.merges = [tuple(m) for m in merges]
        if len(set(self.merges)) != len(self.merges):
            raise ContractError("duplicate merges in BPE model")
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    def __len__(self) -> int:
        return len(self.merges)

    def __eq__(self, other) -> bool:
        return isinstance(other, BpeModel) and self.merges == other.merges

    def segment_word(self, word: str) -> tuple[str, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = list(_word_symbols(word))
        while len(syms) > 1:
            pairs = [(self.ranks.get((a, b)), i) for i, (a, b) in enumerate(zip(syms, syms[1:]))]
            ranked = [(r, i) for r, i in pairs if r is not None]
            if not ranked:
                break
            best = min(ranked)[0]
            left, right = self.merges[best]
            merged, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == left and syms[i + 1] == right:
                    merged.append(left + right)
                    i += 2
                else:
                    merged.append(syms[i])
                    i += 1
            syms = merged
        out = tuple(syms)
        self._cache[word] = out
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> BpeModel:
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + EOW,)


def bpe_train(corpus: Iterable[Sequence[str] | str], num_merges: int) -> BpeModel:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties go to the lexicographically smallest pair. Stops early once no pair
    occurs more than once.
    """
    if num_merges < 0:
        raise ContractError("num_merges must be >= 0")
    freq: collections.Counter = collections.Counter()
    for line in corpus:
        freq.update(line.split() if isinstance(line, str) else line)
    if not freq:
        raise InputError("cannot train BPE on an empty corpus")
    words = {_word_symbols(w): c for w, c in freq.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: collections.Counter = collections.Counter()
        for syms, c in words.items():
            for p in zip(syms, syms[1:]):
                pairs[p] += c
        if not pairs:
            break
        top = max(pairs.values())
        if top < 2:
            break
        best = min(p for p, c in pairs.items() if c == top)
        merges.append(best)
        a, b = best
        updated = {}
        for syms, c in words.items():
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            key = tuple(out)
            updated[key] = updated.get(key, 0) + c
        words = updated
    return BpeModel(merges)


def bpe_apply(model: BpeModel, sentence: str) -> list[str]:
    return [sub for word in sentence.split() for sub in model.segment_word(word)]


def detokenize(tokens: Iterable[str]) -> str:
    """Join subwords back into space-separated words."""
    words, cur = [], ""
    for tok in tokens:
        if tok.endswith(EOW):
            words.append(cur + tok[: -len(EOW)])
            cur = ""
        else:
            cur += tok
    if cur:
        words.append(cur)
    return " ".join(words)


class Vocab:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\t{i}\n" for i, t in enumerate(self.itos)), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        rows = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line:
                tok, idx = line.rsplit("\t", 1)
                rows.append((int(idx), tok))
        rows.sort()
        if [i for i, _ in rows] != list(range(len(rows))) or tuple(t for _, t in rows[:4]) != RESERVED:
            raise InputError(f"{path}: malformed vocabulary file")
        v = cls()
        for _, tok in rows[4:]:
            v.add(tok)
        return v


def build_vocab(model: BpeModel, sentences: Iterable[str]) -> Vocab:
    """Vocabulary over every subword the model produces on ``sentences``, in sorted order."""
    seen = set()
    for s in sentences:
        seen.update(bpe_apply(model, s))
    return Vocab(sorted(seen))


def encode_ids(v: Vocab, tokens: Iterable[str]) -> list[int]:
    return [v.stoi.get(t, UNK_ID) for t in tokens] + [EOS_ID]


def decode_ids(v: Vocab, ids: Iterable[int]) -> list[str]:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(v):
            raise ContractError(f"token id {i} outside vocabulary of size {len(v)}")
        if i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID):
            continue
        out.append(v.itos[i])
    return out


class TextCodec:
    """Sentence <-> id sequence through normalization, BPE and the vocabulary."""

    def __init__(self, bpe: BpeModel, vocab: Vocab):
        self.bpe = bpe
        self.vocab = vocab

    def encode(self, sentence: str) -> list[int]:
        return encode_ids(self.vocab, bpe_apply(self.bpe, normalize_text(sentence)))

    def decode(self, ids: Iterable[int]) -> str:
        return detokenize(decode_ids(self.vocab, ids))

    @classmethod
    def load(cls, directory) -> TextCodec:
        d = Path(directory)
        return cls(BpeModel.load(d / "bpe.merges"), Vocab.load(d / "vocab.tsv"))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.bpe.save(d / "bpe.merges")
        self.vocab.save(d / "vocab.tsv")


def build_codec(sentences: Iterable[str], num_merges: int) -> TextCodec:
    """Learn BPE on the normalized sentences and the vocabulary it induces."""
    norm = [normalize_text(s) for s in sentences]
    model = bpe_train(norm, num_merges)
    return TextCodec(model, build_vocab(model, norm))
