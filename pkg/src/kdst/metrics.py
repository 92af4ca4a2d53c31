"""Corpus BLEU-4 (multi-bleu semantics) and word error rate."""
from __future__ import annotations

import collections
import math
from typing import Sequence

from .errors import InputError


def _words(s) -> list[str]:
    return (s.split() if isinstance(s, str) else list(s))


def _ngrams(words: Sequence[str], n: int) -> collections.Counter:
    return collections.Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4) -> dict:
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise InputError("BLEU needs at least one sentence pair")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = [w.lower() for w in _words(hyp)]
        r = [w.lower() for w in _words(ref)]
        if not r:
            raise InputError("empty reference sentence")
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}


def bleu(hypotheses, references, max_n: int = 4, smooth: bool = False) -> float:
    """Case-insensitive corpus BLEU in [0, 100].

    Without smoothing any zero n-gram precision gives 0, as multi-bleu.pl does.
    ``smooth`` adds one to every count for n > 1 (reported separately).
    """
    st = bleu_stats(hypotheses, references, max_n)
    log_p = 0.0
    for n, (m, t) in enumerate(zip(st["matches"], st["totals"]), start=1):
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    hyp_len, ref_len = st["hyp_len"], st["ref_len"]
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def edit_distance(hyp: Sequence[str], ref: Sequence[str]) -> int:
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp_words, ref_words) -> float:
    """Word error rate of one hypothesis against one reference, in percent."""
    return corpus_wer([hyp_words], [ref_words])


def corpus_wer(hypotheses, references) -> float:
    """Total word edits over total reference words, as a percentage."""
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not references:
        raise InputError("WER needs at least one reference")
    edits = words = 0
    for hyp, ref in zip(hypotheses, references):
        r = _words(ref)
        if not r:
            raise InputError("empty reference")
        edits += edit_distance(_words(hyp), r)
        words += len(r)
    return 100.0 * edits / words
