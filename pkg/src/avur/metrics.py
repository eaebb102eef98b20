"""Word error rate and N-best summary statistics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .kernels import edit_distance


def _words(seq) -> int:
    return len(seq.split()) if isinstance(seq, str) else len(seq)


def _split(seq) -> list:
    return seq.split() if isinstance(seq, str) else list(seq)


def word_edit_distance(ref, hyp) -> int:
    """Levenshtein distance over words (strings are split on whitespace)."""
    r, h = _split(ref), _split(hyp)
    if all(isinstance(t, (int, np.integer)) for t in r + h):
        return edit_distance(np.asarray(r, dtype=np.int64), np.asarray(h, dtype=np.int64))
    vocab: dict = {}
    ids = lambda ws: np.asarray([vocab.setdefault(str(w), len(vocab)) for w in ws], dtype=np.int64)  # noqa: E731
    return edit_distance(ids(r), ids(h))


def wer(ref, hyp) -> float:
    n = _words(ref)
    if n == 0:
        raise ValueError("WER needs a non-empty reference")
    return word_edit_distance(ref, hyp) / n


def corpus_wer(refs: Sequence, hyps: Sequence) -> float:
    """Total errors over total reference words."""
    if len(refs) != len(hyps):
        raise ValueError("reference and hypothesis counts differ")
    errors = sum(word_edit_distance(r, h) for r, h in zip(refs, hyps))
    words = sum(_words(r) for r in refs)
    if words == 0:
        raise ValueError("WER needs a non-empty reference")
    return errors / words


def oracle_wer(refs: Sequence, nbests) -> float:
    """Corpus WER when every utterance picks its closest N-best candidate."""
    errors = sum(min(word_edit_distance(r, c) for c in nb.candidates) for r, nb in zip(refs, nbests))
    return errors / sum(_words(r) for r in refs)
