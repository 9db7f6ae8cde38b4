"""Expression-level recognition metrics over token sequences."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

from .errors import LengthMismatch, PosForestError
from .lexer import normalize, texts_of

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricsReport:
    exprate: float
    leq1: float
    leq2: float
    leq3: float
    cer: float
    n_samples: int

    def to_json(self) -> str:
        """Fixed 6-decimal JSON, keys in a stable order."""
        body = ", ".join(
            f'"{k}": {getattr(self, k):.6f}' for k in ("exprate", "leq1", "leq2", "leq3", "cer")
        )
        return "{" + body + f', "n": {self.n_samples}' + "}"

    def as_dict(self):
        return json.loads(self.to_json())


def edit_distance(a, b) -> int:
    """Token-level Levenshtein distance with unit costs."""
    a, b = texts_of(a), texts_of(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _canonical(seq):
    texts = texts_of(seq)
    try:
        return normalize(texts)
    except PosForestError:
        return texts


def evaluate(preds: Sequence, gts: Sequence, normalize_inputs: bool = True, micro_cer: bool = True) -> MetricsReport:
    """ExpRate, <=1/<=2/<=3 and CER.

    Both sides are normalized first (``x^2`` matches ``x^{2}``); sequences that
    fail to normalize are compared as written.  ``micro_cer=False`` averages
    per-sample error rates instead of pooling distances.
    """
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} references")
    if not gts:
        raise LengthMismatch("nothing to evaluate")
    dists, ref_lens = [], []
    for i, (p, g) in enumerate(zip(preds, gts)):
        if normalize_inputs:
            p2, g2 = _canonical(p), _canonical(g)
            if p2 != texts_of(p) or g2 != texts_of(g):
                log.info("sample %d: normalization changed the input", i)
            p, g = p2, g2
        dists.append(edit_distance(p, g))
        ref_lens.append(len(texts_of(g)))
    n = len(dists)

    def rate(k):
        return sum(d <= k for d in dists) / n

    if micro_cer:
        cer = sum(dists) / max(1, sum(ref_lens))
    else:
        cer = sum(d / max(1, r) for d, r in zip(dists, ref_lens)) / n
    return MetricsReport(rate(0), rate(1), rate(2), rate(3), cer, n)
