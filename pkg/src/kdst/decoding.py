"""Greedy, beam and ensemble decoding, the ASR->MT cascade, and attention dumps."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .audio import FeatureMatrix, Waveform, featurize
from .errors import ConfigError
from .models import TransformerModel, decode, encode, forward
from .tensor import Tensor, no_grad
from .text import BOS_ID, EOS_ID, PAD_ID, TextCodec

log = logging.getLogger(__name__)

FORBIDDEN = (PAD_ID, BOS_ID)


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool

    def score(self, alpha: float = 0.0) -> float:
        if alpha == 0.0:
            return self.logprob
        steps = len(self.tokens) + int(self.finished)
        return self.logprob / max(1, steps) ** alpha


@dataclass
class AttentionDump:
    weights: list[np.ndarray]  # per layer, [h, target_len, source_len]
    example_id: str
    tag: str
    files: list[Path] = field(default_factory=list)


def _as_batch(model: TransformerModel, encoder_input) -> np.ndarray:
    x = encoder_input.frames if isinstance(encoder_input, FeatureMatrix) else np.asarray(encoder_input)
    return x[None]


class _StepScorer:
    """Next-token log-probabilities for a set of prefixes under one model."""

    def __init__(self, model: TransformerModel, encoder_input):
        self.model = model
        with no_grad():
            self.memory, self.mask = encode(model, _as_batch(model, encoder_input))

    def __call__(self, prefixes: np.ndarray) -> np.ndarray:
        k = prefixes.shape[0]
        mem = self.memory.data
        if k != mem.shape[0]:
            mem = np.ascontiguousarray(np.broadcast_to(mem[:1], (k,) + mem.shape[1:]))
        mask = np.broadcast_to(self.mask[:1], (k,) + self.mask.shape[1:])
        with no_grad():
            logits, _ = decode(self.model, Tensor(mem), mask, prefixes)
            lp = T.log_softmax(Tensor(logits.data[:, -1, :]), axis=-1).data
        return lp.astype(np.float64)


def _cap(models: Sequence[TransformerModel], max_len: int) -> int:
    """Prefixes carry a leading bos, so at most ``max_tgt_len - 1`` tokens fit."""
    return min(max_len, *(m.cfg.max_tgt_len - 1 for m in models))


def _combine(rows: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the models' probabilities, back in log space."""
    if all(np.array_equal(rows[0], r) for r in rows[1:]):
        # the mean of identical distributions is that distribution; skip the lossy exp/log round trip
        out = rows[0].copy()
    else:
        with np.errstate(divide="ignore"):
            out = np.log(np.mean(np.exp(np.stack(rows)), axis=0))
    out[:, list(FORBIDDEN)] = -np.inf
    return out


def greedy_decode(model: TransformerModel, encoder_input, max_len: int = 50) -> Hypothesis:
    """Append the argmax token (lowest id on ties) until eos or ``max_len`` tokens."""
    scorer = _StepScorer(model, encoder_input)
    tokens: list[int] = []
    total = 0.0
    for _ in range(_cap([model], max_len)):
        lp = _combine([scorer(np.array([[BOS_ID] + tokens]))])[0]
        tok = int(np.argmax(lp))
        total += lp[tok]
        if tok == EOS_ID:
            return Hypothesis(tokens, total, True)
        tokens.append(tok)
    return Hypothesis(tokens, total, False)


def greedy_decode_batch(model: TransformerModel, enc_batch, src_lengths, max_len: int = 50) -> list[list[int]]:
    """Batched greedy decoding for fast dev-set evaluation."""
    with no_grad():
        memory, mask = encode(model, enc_batch, src_lengths)
        b = memory.shape[0]
        ys = np.full((b, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(_cap([model], max_len)):
            logits, _ = decode(model, memory, mask, ys)
            last = logits.data[:, -1, :].copy()
            last[:, list(FORBIDDEN)] = -np.inf
            nxt = np.where(done, PAD_ID, np.argmax(last, axis=-1))
            ys = np.concatenate([ys, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
            if done.all():
                break
    out = []
    for row in ys[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS_ID, PAD_ID):
                break
            toks.append(int(t))
        out.append(toks)
    return out


def _beam(scorers: Sequence, beam_size: int, max_len: int, alpha: float) -> Hypothesis:
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    live = [Hypothesis([], 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        prefixes = np.array([[BOS_ID] + h.tokens for h in live], dtype=np.int64)
        lp = _combine([s(prefixes) for s in scorers])
        cands = []
        for i, h in enumerate(live):
            for tok in np.flatnonzero(np.isfinite(lp[i])):
                cands.append((h.logprob + lp[i, tok], h.tokens + [int(tok)]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for s, toks in cands[:beam_size]:
            if toks[-1] == EOS_ID:
                finished.append(Hypothesis(toks[:-1], s, True))
            else:
                live.append(Hypothesis(toks, s, False))
        if not live:
            break
        # with no length penalty, scores only fall as hypotheses grow
        if alpha == 0.0 and finished and max(f.logprob for f in finished) >= max(h.logprob for h in live):
            break
    pool = finished + live
    return min(pool, key=lambda h: (-h.score(alpha), h.tokens))


def beam_search(model: TransformerModel, encoder_input, beam_size: int = 4, max_len: int = 50,
                alpha: float = 0.0) -> Hypothesis:
    """Beam search ranked by logprob / length**alpha; ties go to the smaller token sequence."""
    return _beam([_StepScorer(model, encoder_input)], beam_size, _cap([model], max_len), alpha)


def ensemble_decode(models: Sequence[TransformerModel], encoder_inputs: Sequence, beam_size: int = 4,
                    max_len: int = 50, alpha: float = 0.0) -> Hypothesis:
    """Beam search over the averaged next-token distribution of several models."""
    if not models or len(models) != len(encoder_inputs):
        raise ConfigError("ensemble needs one encoder input per model")
    sizes = {m.cfg.tgt_vocab for m in models}
    if len(sizes) != 1:
        raise ConfigError(f"ensemble members disagree on target vocabulary size: {sorted(sizes)}")
    return _beam([_StepScorer(m, x) for m, x in zip(models, encoder_inputs)], beam_size, _cap(models, max_len),
                 alpha)


def pipeline_translate(asr: TransformerModel, mt: TransformerModel, audio, codec: TextCodec,
                       beam_size: int = 4, max_len: int = 50) -> list[int]:
    """Cascade: beam-decode a transcript, re-tokenize it, beam-decode its translation."""
    if isinstance(audio, Waveform):
        audio = featurize(audio)
    transcript = codec.decode(beam_search(asr, audio, beam_size, max_len).tokens)
    if not transcript:
        log.warning("empty ASR output; returning an empty translation")
        return []
    return translate_text(mt, transcript, codec, beam_size, max_len)


def translate_text(mt: TransformerModel, sentence: str, codec: TextCodec, beam_size: int = 4,
                   max_len: int = 50) -> list[int]:
    src = np.array(codec.encode(sentence), dtype=np.int64)
    return beam_search(mt, src, beam_size, max_len).tokens


# ------------------------------------------------------------ attention

def attention_matrices(model: TransformerModel, encoder_input, target_ids) -> list[np.ndarray]:
    """Teacher-forced encoder-decoder attention, one ``[h, T, S]`` array per layer.

    ``target_ids`` ends with eos; row t is the attention used to predict token t.
    """
    y = np.asarray(target_ids, dtype=np.int64)
    dec_in = np.concatenate([[BOS_ID], y[:-1]])
    enc = encoder_input.frames if isinstance(encoder_input, FeatureMatrix) else np.asarray(encoder_input)
    with no_grad():
        _, attn = forward(model, enc, dec_in)
    return [a.data.copy() for a in attn]


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def to_pixels(weights: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * np.asarray(weights, dtype=np.float64)).astype(np.uint8)


def export_attention(model: TransformerModel, encoder_input, target_ids, out_dir, tag: str,
                     example_id: str = "example") -> AttentionDump:
    """Write each (layer, head) attention matrix as CSV and as an 8-bit PGM heatmap."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mats = attention_matrices(model, encoder_input, target_ids)
    dump = AttentionDump(mats, example_id, tag)
    for li, layer in enumerate(mats):
        for hi, m in enumerate(layer):
            stem = out / f"{tag}_{example_id}_L{li}_H{hi}"
            with open(stem.with_suffix(".csv"), "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerows([[repr(float(v)) for v in row] for row in m])
            write_pgm(stem.with_suffix(".pgm"), to_pixels(m))
            dump.files += [stem.with_suffix(".csv"), stem.with_suffix(".pgm")]
    return dump


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        return np.array([[float(v) for v in row] for row in csv.reader(f)], dtype=np.float64)
