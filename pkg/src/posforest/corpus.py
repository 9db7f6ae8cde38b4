"""Synthetic expression corpora: grammar sampling, coarse rendering and file I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .container import read_records, write_records
from .errors import GridOverflow, ParseError, PosForestError
from .forest import (
    DEFAULT_MAX_NESTING,
    ID_VOCAB,
    ForestTargets,
    derive_targets,
    encode_forest,
    format_target_line,
)
from .forest_oracle import Attach, Fraction, Group, Leaf, parse_forest
from .lexer import CLOSE, FRAC, OPEN, SQRT, SUB, SUP, TokenSeq, Vocabulary, normalize, tokenize

PRODUCTIONS = ("superscript", "subscript", "fraction", "radical", "special-operator", "atom")

DEFAULT_WEIGHTS = {
    "superscript": 0.17,
    "subscript": 0.13,
    "fraction": 0.12,
    "radical": 0.06,
    "special-operator": 0.07,
    "atom": 0.45,
}

DEFAULT_ALPHABET = tuple("abcnxyz0123456789") + ("+", "-", "=", "\\alpha", "\\beta", "\\pi")
DEFAULT_OPERATORS = ("\\sum", "\\prod", "\\int", "\\lim")

# probability that a script production carries the opposite script as well (x^{a}_{b})
_PAIR_SCRIPT = 0.3
_MAX_ATTEMPTS = 64


@dataclass(frozen=True)
class GrammarConfig:
    max_depth: int = 2
    entity_alphabet: tuple[str, ...] = DEFAULT_ALPHABET
    structure_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    seed: int = 42
    max_items: int = 4
    operators: tuple[str, ...] = DEFAULT_OPERATORS
    grid_budget: int | None = 16
    max_tokens: int | None = None

    def __post_init__(self):
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        unknown = set(self.structure_weights) - set(PRODUCTIONS)
        if unknown:
            raise ValueError(f"unknown productions {sorted(unknown)}")
        if abs(sum(self.structure_weights.values()) - 1.0) > 1e-9:
            raise ValueError("structure weights must sum to 1")
        if any(w < 0 for w in self.structure_weights.values()):
            raise ValueError("structure weights must be nonnegative")
        if not self.entity_alphabet:
            raise ValueError("entity alphabet is empty")


class _Sampler:
    def __init__(self, cfg: GrammarConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.kinds = [k for k in PRODUCTIONS if self.cfg.structure_weights.get(k, 0) > 0]
        w = np.array([self.cfg.structure_weights[k] for k in self.kinds])
        self.weights = w / w.sum()

    def atom(self):
        alphabet = self.cfg.entity_alphabet
        return alphabet[int(self.rng.integers(len(alphabet)))]

    def group(self, depth):
        return [OPEN, *self.sequence(depth, max(1, self.cfg.max_items // 2)), CLOSE]

    def sequence(self, depth, max_items):
        n = int(self.rng.integers(1, max_items + 1))
        out = []
        for _ in range(n):
            out.extend(self.item(depth))
        return out

    def item(self, depth):
        if depth >= self.cfg.max_depth:
            return [self.atom()]
        kind = self.kinds[int(self.rng.choice(len(self.kinds), p=self.weights))]
        if kind == "atom":
            return [self.atom()]
        if kind in ("superscript", "subscript"):
            first, second = (SUP, SUB) if kind == "superscript" else (SUB, SUP)
            out = [self.atom(), first, *self.group(depth + 1)]
            if self.rng.random() < _PAIR_SCRIPT:
                out += [second, *self.group(depth + 1)]
            return out
        if kind == "fraction":
            return [FRAC, *self.group(depth + 1), *self.group(depth + 1)]
        if kind == "radical":
            return [SQRT, *self.group(depth + 1)]
        op = self.cfg.operators[int(self.rng.integers(len(self.cfg.operators)))]
        out = [op, SUB, *self.group(depth + 1)]
        if op != "\\lim":
            out += [SUP, *self.group(depth + 1)]
        return out


def generate_one(config: GrammarConfig, index: int, vocab: Vocabulary) -> TokenSeq:
    """Expression number ``index``; a pure function of ``(config, index)``."""
    texts = None
    for attempt in range(_MAX_ATTEMPTS):
        rng = np.random.default_rng([config.seed, index, attempt])
        texts = _Sampler(config, rng).sequence(0, config.max_items)
        if config.max_tokens is not None and len(texts) > config.max_tokens:
            continue
        if config.grid_budget is None:
            break
        w, h = layout_extent(texts, vocab)
        if w <= config.grid_budget and h <= config.grid_budget:
            break
    else:
        texts = [config.entity_alphabet[index % len(config.entity_alphabet)]]
    return TokenSeq.from_texts(texts, vocab)


def generate(config: GrammarConfig, count: int, vocab: Vocabulary | None = None) -> list[TokenSeq]:
    vocab = vocab or Vocabulary.default()
    missing = [t for t in (*config.entity_alphabet, *config.operators) if t not in vocab]
    if missing:
        raise ValueError(f"grammar tokens missing from vocabulary: {missing}")
    return [generate_one(config, i, vocab) for i in range(count)]


# -- rendering ------------------------------------------------------------

@dataclass
class _Box:
    cells: list  # (dy, dx, token_index); dy < 0 is above the baseline
    width: int

    @property
    def top(self):
        return min((c[0] for c in self.cells), default=0)

    @property
    def bottom(self):
        return max((c[0] for c in self.cells), default=0)

    def moved(self, dy, dx):
        return [(y + dy, x + dx, i) for y, x, i in self.cells]


def _layout(nodes, texts, omega) -> _Box:
    cells = []
    x = 0
    pending = None  # (script token, start column) of a script that can take a partner
    for node in nodes:
        if isinstance(node, Leaf):
            pending = None
            if texts[node.index] in omega:
                continue
            cells.append((0, x, node.index))
            x += 1
        elif isinstance(node, Group):
            pending = None
            box = _layout(node.body, texts, omega)
            cells += box.moved(0, x)
            x += box.width
        elif isinstance(node, Attach) and texts[node.index] in (SUP, SUB):
            tok = texts[node.index]
            box = _layout(node.arg.body, texts, omega)
            dy = -1 - box.bottom if tok == SUP else 1 - box.top
            if pending is not None and pending[0] != tok:
                start = pending[1]
                x = max(x, start + box.width)
                pending = None
            else:
                start = x
                x += box.width
                pending = (tok, start)
            cells += box.moved(dy, start)
        elif isinstance(node, Attach):
            pending = None
            cells.append((0, x, node.index))
            box = _layout(node.arg.body, texts, omega)
            cells += box.moved(0, x + 1)
            x += 1 + box.width
        elif isinstance(node, Fraction):
            pending = None
            num = _layout(node.num.body, texts, omega)
            den = _layout(node.den.body, texts, omega)
            w = max(num.width, den.width, 1)
            cells += [(0, x + j, node.index) for j in range(w)]
            cells += num.moved(-1 - num.bottom, x + (w - num.width) // 2)
            cells += den.moved(1 - den.top, x + (w - den.width) // 2)
            x += w
    return _Box(cells, x)


def _check_renderable(vocab: Vocabulary):
    missing = {SUP, SUB, OPEN, CLOSE} - set(vocab.omega)
    if missing:
        raise ValueError(f"rendering needs {sorted(missing)} to be structure symbols")


def _layout_tokens(texts, vocab):
    _check_renderable(vocab)
    return _layout(parse_forest(texts), texts, vocab.omega)


def layout_extent(texts: Sequence[str], vocab: Vocabulary) -> tuple[int, int]:
    """(width, height) in cells of the rendered layout."""
    box = _layout_tokens(list(texts), vocab)
    return box.width, box.bottom - box.top + 1


def glyph_planes(vocab: Vocabulary) -> dict[str, int]:
    """Plane index per entity token; plane 0 is the blank plane."""
    return {tok: i + 1 for i, tok in enumerate(vocab.entity_tokens())}


@dataclass
class RenderedSample:
    latex: TokenSeq
    identifiers: list[str]
    grid: np.ndarray  # [budget, budget, planes], one-hot per cell
    targets: ForestTargets
    placements: list = field(default_factory=list)  # (token_index, row, col)


def render(expr: TokenSeq, ids: Sequence[str], cell_budget: int = 16) -> RenderedSample:
    if len(ids) != len(expr):
        raise ValueError(f"{len(expr)} tokens but {len(ids)} identifiers")
    vocab = expr.vocab
    texts = expr.texts
    box = _layout_tokens(texts, vocab)
    height = box.bottom - box.top + 1
    if box.width > cell_budget or height > cell_budget:
        raise GridOverflow(f"layout is {box.width}x{height} cells, budget {cell_budget}")
    col0 = (cell_budget - box.width) // 2
    row0 = (cell_budget - height) // 2 - box.top
    planes = glyph_planes(vocab)
    grid = np.zeros((cell_budget, cell_budget, len(planes) + 1))
    grid[:, :, 0] = 1.0
    placements = []
    for dy, dx, idx in box.cells:
        r, c = row0 + dy, col0 + dx
        if grid[r, c, 0] != 1.0:
            raise AssertionError(f"layout collision at cell ({r}, {c})")
        grid[r, c, 0] = 0.0
        grid[r, c, planes[texts[idx]]] = 1.0
        placements.append((idx, r, c))
    return RenderedSample(expr, list(ids), grid, derive_targets(expr, ids), placements)


def render_expression(expr: TokenSeq, cell_budget: int = 16, max_nesting: int = DEFAULT_MAX_NESTING) -> RenderedSample:
    expr = normalize(expr)
    return render(expr, encode_forest(expr, max_nesting), cell_budget)


# -- files ----------------------------------------------------------------

def read_corpus(path, vocab: Vocabulary) -> list[tuple[str, TokenSeq]]:
    """Read ``id TAB latex [TAB ...]`` lines; extra columns (targets files) are ignored."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError(line_no, "expected 'id<TAB>latex'")
            if not parts[0]:
                raise ParseError(line_no, "empty expression id")
            try:
                seq = tokenize(parts[1], vocab)
            except PosForestError as exc:
                raise ParseError(line_no, str(exc)) from exc
            out.append((parts[0], seq))
    return out


def write_corpus(path, entries: Iterable[tuple[str, TokenSeq]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for expr_id, seq in entries:
            fh.write(f"{expr_id}\t{' '.join(seq.texts)}\n")


@dataclass
class TargetRecord:
    id: str
    latex: TokenSeq
    identifiers: list[str]
    targets: ForestTargets


def write_targets(path, entries: Iterable[tuple[str, TokenSeq]], max_nesting: int = DEFAULT_MAX_NESTING) -> None:
    """Normalize, encode and write one targets line per expression."""
    lines = []
    for i, (expr_id, seq) in enumerate(entries):
        try:
            seq = normalize(seq)
            ids = encode_forest(seq, max_nesting)
        except PosForestError as exc:
            exc.expression_index = i
            raise
        lines.append(format_target_line(expr_id, seq, ids, derive_targets(seq, ids)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(line + "\n" for line in lines)


def read_targets(path, vocab: Vocabulary) -> list[TargetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ParseError(line_no, f"expected 5 columns, found {len(parts)}")
            try:
                seq = tokenize(parts[1], vocab)
                ids = parts[2].split()
                y_n = tuple(int(n) for n in parts[3].split())
                y_r = tuple(parts[4])
            except (PosForestError, ValueError) as exc:
                raise ParseError(line_no, str(exc)) from exc
            if not len(seq) == len(ids) == len(y_n) == len(y_r):
                raise ParseError(line_no, "column lengths disagree")
            if any(c not in ("M", "L", "R") for c in y_r):
                raise ParseError(line_no, "relative positions must be M, L or R")
            records.append(TargetRecord(parts[0], seq, ids, ForestTargets(tuple(seq.ids), y_n, y_r)))
    return records


def write_samples(path, samples: Iterable[tuple[str, RenderedSample]]) -> None:
    records = {}
    for sample_id, s in samples:
        records[f"{sample_id}/grid"] = s.grid
        records[f"{sample_id}/tokens"] = np.array(s.latex.ids, dtype=np.float64)
        records[f"{sample_id}/y_n"] = np.array(s.targets.y_n, dtype=np.float64)
        records[f"{sample_id}/y_r"] = np.array([ID_VOCAB.index(c) for c in s.targets.y_r], dtype=np.float64)
    write_records(path, records)


def read_samples(path, vocab: Vocabulary, max_nesting: int = DEFAULT_MAX_NESTING) -> list[tuple[str, RenderedSample]]:
    records = read_records(path)
    order = []
    for name in records:
        sample_id, _, kind = name.rpartition("/")
        if kind == "grid":
            order.append(sample_id)
    out = []
    for sample_id in order:
        ids = [int(v) for v in records[f"{sample_id}/tokens"]]
        seq = TokenSeq(tuple(vocab.from_id(i) for i in ids), vocab)
        sample = render(seq, encode_forest(seq, max_nesting), records[f"{sample_id}/grid"].shape[0])
        if not np.array_equal(sample.grid, records[f"{sample_id}/grid"]):
            raise ParseError(0, f"sample {sample_id}: stored grid does not match its expression")
        out.append((sample_id, sample))
    return out


def is_sample_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == b"PFRM"


def load_any(path, vocab: Vocabulary):
    """Read a corpus TSV or rendered-sample file into ``(id, TokenSeq)`` pairs."""
    if Path(path).exists() and is_sample_file(path):
        return [(i, s.latex) for i, s in read_samples(path, vocab)]
    return read_corpus(path, vocab)
