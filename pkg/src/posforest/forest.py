"""Position forest coding and the supervision targets derived from it.

Every token receives an identifier over ``{M, L, R}``: ``M`` for the main
body, ``L`` for the upper part of a substructure, ``R`` for the lower part.
Superscripts append ``L`` over their whole span, subscripts and radicals
append ``R``, fractions append ``L`` over the numerator span (trigger
included) and ``R`` over the denominator span.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MalformedSubstructure, NestingTooDeep, UnbalancedBraces
from .lexer import CLOSE, FRAC, OPEN, SQRT, SUB, SUP, TokenSeq, texts_of

DEFAULT_MAX_NESTING = 3

# Cell alphabet of the identifier matrix; also the relative-position classes.
ID_VOCAB = ("[sos]", "[eos]", "[pad]", "M", "L", "R")
ID_INDEX = {c: i for i, c in enumerate(ID_VOCAB)}

_APPEND = {SUP: "L", SUB: "R", SQRT: "R"}


@dataclass(frozen=True)
class ForestTargets:
    y_c: tuple[int, ...]
    y_n: tuple[int, ...]
    y_r: tuple[str, ...]

    def __post_init__(self):
        if not len(self.y_c) == len(self.y_n) == len(self.y_r):
            raise ValueError("target lists differ in length")

    def __len__(self):
        return len(self.y_c)

    @property
    def y_r_index(self) -> list[int]:
        return [ID_INDEX[c] for c in self.y_r]


@dataclass(frozen=True)
class IdentifierMatrix:
    cells: tuple[tuple[str, ...], ...]

    @property
    def rows(self):
        return len(self.cells)

    @property
    def cols(self):
        return len(self.cells[0]) if self.cells else 0

    def indices(self) -> np.ndarray:
        """Integer matrix of cell classes, shape ``[rows, cols]``."""
        return np.array([[ID_INDEX[c] for c in row] for row in self.cells], dtype=np.int64).reshape(
            self.rows, self.cols
        )


def find_group_end(seq, open_idx: int) -> int:
    texts = texts_of(seq)
    if open_idx >= len(texts) or texts[open_idx] != OPEN:
        raise MalformedSubstructure(f"expected '{{' at index {open_idx}")
    depth = 0
    for i in range(open_idx, len(texts)):
        tok = texts[i]
        if tok == OPEN:
            depth += 1
        elif tok == CLOSE:
            depth -= 1
            if depth == 0:
                return i
    raise UnbalancedBraces(f"'{{' at index {open_idx} is never closed")


def _group_after(texts, trigger_idx, which):
    j = trigger_idx + 1
    if j >= len(texts) or texts[j] != OPEN:
        raise MalformedSubstructure(
            f"{texts[trigger_idx]} at index {trigger_idx} lacks its {which} group"
        )
    return find_group_end(texts, j)


def encode_forest(seq, max_nesting: int | None = DEFAULT_MAX_NESTING) -> list[str]:
    """Assign a position identifier to every token of a normalized sequence.

    ``max_nesting=None`` disables the depth limit.
    """
    texts = texts_of(seq)
    ids = [["M"] for _ in texts]
    limit = None if max_nesting is None else max_nesting + 1

    def append(lo, hi, ch):
        for t in range(lo, hi + 1):
            ids[t].append(ch)
            if limit is not None and len(ids[t]) > limit:
                raise NestingTooDeep(t, len(ids[t]) - 1, max_nesting)

    def scan(l, r):
        while l < r:
            tok = texts[l]
            if tok in _APPEND:
                end = _group_after(texts, l, "argument")
                append(l, end, _APPEND[tok])
                scan(l + 2, end)
                l = end + 1
            elif tok == FRAC:
                end1 = _group_after(texts, l, "numerator")
                end2 = _group_after(texts, end1, "denominator")
                append(l, end1, "L")
                append(end1 + 1, end2, "R")
                scan(l + 2, end1)
                scan(end1 + 2, end2)
                l = end2 + 1
            else:
                l += 1

    scan(0, len(texts))
    return ["".join(chars) for chars in ids]


def derive_targets(seq: TokenSeq, ids: Sequence[str]) -> ForestTargets:
    if len(seq) != len(ids):
        raise ValueError(f"{len(seq)} tokens but {len(ids)} identifiers")
    return ForestTargets(
        y_c=tuple(seq.ids),
        y_n=tuple(len(i) - 1 for i in ids),
        y_r=tuple(i[-1] for i in ids),
    )


def build_identifier_matrix(ids: Sequence[str], max_nesting: int = DEFAULT_MAX_NESTING) -> IdentifierMatrix:
    width = max_nesting + 3
    rows = []
    for t, ident in enumerate(ids):
        if len(ident) > max_nesting + 1:
            raise NestingTooDeep(t, len(ident) - 1, max_nesting)
        row = ["[sos]", *ident, "[eos]"]
        row += ["[pad]"] * (width - len(row))
        rows.append(tuple(row))
    return IdentifierMatrix(tuple(rows))


def expression_complexity(ids: Sequence[str]) -> int:
    if not ids:
        raise ValueError("empty identifier list")
    return max(len(i) for i in ids) - 1


def stratify(exprs, max_nesting: int | None = DEFAULT_MAX_NESTING) -> dict[int, list[int]]:
    """Bucket expression indices by structural complexity (sorted by level)."""
    buckets: dict[int, list[int]] = {}
    for i, expr in enumerate(exprs):
        try:
            level = expression_complexity(encode_forest(expr, max_nesting))
        except Exception as exc:
            exc.expression_index = i
            raise
        buckets.setdefault(level, []).append(i)
    return dict(sorted(buckets.items()))


def format_target_line(expr_id: str, seq, ids: Sequence[str], targets: ForestTargets) -> str:
    return "\t".join(
        [
            expr_id,
            " ".join(texts_of(seq)),
            " ".join(ids),
            " ".join(str(n) for n in targets.y_n),
            "".join(targets.y_r),
        ]
    )
