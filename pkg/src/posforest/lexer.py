"""LaTeX math lexer over a closed symbol dictionary.

Tokens are produced by maximal munch: a backslash followed by letters is one
command token, a backslash followed by any other character is a two-character
control symbol (``\\{``), and everything else is a single character.  All
whitespace is discarded.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import (
    MalformedScript,
    MalformedSubstructure,
    MissingFracArgs,
    UnbalancedBraces,
    UnknownToken,
    UnsupportedSyntax,
    UnterminatedCommand,
)

PAD, SOS, EOS = "[pad]", "[sos]", "[eos]"
RESERVED = (PAD, SOS, EOS)

SUP, SUB, SQRT, FRAC = "^", "_", "\\sqrt", "\\frac"
THETA = (SUP, SUB, SQRT, FRAC)
OPEN, CLOSE = "{", "}"
DEFAULT_OMEGA = frozenset({SUP, SUB, OPEN, CLOSE})

_HEADERS = {"[entity]": False, "[structure]": True}


class SymbolClass(enum.Enum):
    ENTITY = "entity"
    STRUCTURE = "structure"


@dataclass(frozen=True)
class Token:
    text: str
    id: int
    cls: SymbolClass

    def __str__(self):
        return self.text


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list plus the structure set and the substructure triggers.

    ``tokens[0:3]`` are always the reserved ``[pad]``, ``[sos]``, ``[eos]``.
    """

    tokens: tuple[str, ...]
    omega: frozenset[str] = DEFAULT_OMEGA
    theta: tuple[str, ...] = THETA
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with [pad], [sos], [eos]")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if tuple(self.theta) != THETA:
            raise ValueError(f"theta must be {THETA}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        missing = [t for t in (*self.omega, *self.theta) if t not in index]
        if missing:
            raise ValueError(f"tokens missing from vocabulary: {missing}")
        if set(RESERVED) & (set(self.omega) | set(self.theta)):
            raise ValueError("reserved tokens cannot be structure symbols or triggers")
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_lines(cls, lines: Iterable[str], omega: Iterable[str] | None = None) -> "Vocabulary":
        tokens = list(RESERVED)
        structure = set()
        in_structure = False
        for raw in lines:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line in _HEADERS:
                in_structure = _HEADERS[line]
                continue
            if line in RESERVED:
                continue
            if line not in tokens:
                tokens.append(line)
            if in_structure:
                structure.add(line)
        if omega is not None:
            structure = set(omega)
        return cls(tuple(tokens), frozenset(structure))

    @classmethod
    def from_file(cls, path, omega: Iterable[str] | None = None) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh, omega)

    @classmethod
    def default(cls, omega: Iterable[str] | None = None) -> "Vocabulary":
        text = resources.files("posforest").joinpath("data/dictionary.txt").read_text("utf-8")
        return cls.from_lines(text.splitlines(), omega)

    def with_omega(self, omega: Iterable[str]) -> "Vocabulary":
        return Vocabulary(self.tokens, frozenset(omega), self.theta)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, text):
        return text in self._index

    def id_of(self, text: str) -> int:
        return self._index[text]

    def token(self, text: str) -> Token:
        return Token(text, self._index[text], classify_text(text, self))

    def from_id(self, idx: int) -> Token:
        return self.token(self.tokens[idx])

    def entity_tokens(self) -> list[str]:
        """Non-reserved tokens outside the structure set, in vocabulary order."""
        return [t for t in self.tokens[3:] if t not in self.omega]

    @property
    def pad_id(self):
        return 0

    @property
    def sos_id(self):
        return 1

    @property
    def eos_id(self):
        return 2


@dataclass(frozen=True)
class TokenSeq(Sequence):
    tokens: tuple[Token, ...]
    vocab: Vocabulary = field(repr=False, compare=False)

    @classmethod
    def from_texts(cls, texts: Iterable[str], vocab: Vocabulary) -> "TokenSeq":
        out = []
        for i, text in enumerate(texts):
            if text not in vocab:
                raise UnknownToken(i, text)
            out.append(vocab.token(text))
        return cls(tuple(out), vocab)

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.tokens]

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, i):
        return self.tokens[i]

    def __iter__(self) -> Iterator[Token]:
        return iter(self.tokens)

    def __str__(self):
        return detokenize(self)


def texts_of(seq) -> list[str]:
    """Token texts of a TokenSeq or any iterable of tokens / strings."""
    if isinstance(seq, TokenSeq):
        return seq.texts
    return [t.text if isinstance(t, Token) else t for t in seq]


def lex(source: str) -> list[tuple[int, str]]:
    """Split ``source`` into ``(offset, lexeme)`` pairs without vocabulary checks."""
    out = []
    i, n = 0, len(source)
    while i < n:
        ch = source[i]
        if ch.isspace():
            i += 1
            continue
        if ch == "\\":
            if i + 1 >= n:
                raise UnterminatedCommand(i)
            j = i + 1
            if source[j].isascii() and source[j].isalpha():
                while j < n and source[j].isascii() and source[j].isalpha():
                    j += 1
            else:
                j += 1
            out.append((i, source[i:j]))
            i = j
            continue
        out.append((i, ch))
        i += 1
    return out


def tokenize(source: str, vocab: Vocabulary) -> TokenSeq:
    tokens = []
    for pos, lexeme in lex(source):
        if lexeme not in vocab:
            raise UnknownToken(pos, lexeme)
        tokens.append(vocab.token(lexeme))
    return TokenSeq(tuple(tokens), vocab)


def detokenize(seq) -> str:
    return " ".join(texts_of(seq))


def classify_text(text: str, vocab: Vocabulary) -> SymbolClass:
    return SymbolClass.STRUCTURE if text in vocab.omega else SymbolClass.ENTITY


def classify(token, vocab: Vocabulary) -> SymbolClass:
    text = token.text if isinstance(token, Token) else token
    return classify_text(text, vocab)


def _group_end(texts: Sequence[str], open_idx: int) -> int:
    depth = 0
    for i in range(open_idx, len(texts)):
        if texts[i] == OPEN:
            depth += 1
        elif texts[i] == CLOSE:
            depth -= 1
            if depth == 0:
                return i
    raise UnbalancedBraces(f"no closing brace for '{{' at {open_idx}")


def _check_balanced(texts: Sequence[str]):
    depth = 0
    for i, t in enumerate(texts):
        if t == OPEN:
            depth += 1
        elif t == CLOSE:
            depth -= 1
            if depth < 0:
                raise UnbalancedBraces(f"unmatched '}}' at {i}")
    if depth:
        raise UnbalancedBraces(f"{depth} unclosed '{{'")


def _argument(texts, j, owner, missing_exc):
    """Normalize the argument starting at ``j``; returns (braced tokens, next index)."""
    if j >= len(texts) or texts[j] in (CLOSE, SUP, SUB):
        raise missing_exc(f"{owner} at {j - 1} has no argument")
    if texts[j] == OPEN:
        end = _group_end(texts, j)
        return [OPEN, *_normalize(texts[j + 1:end]), CLOSE], end + 1
    if texts[j] in (SQRT, FRAC):
        inner, nxt = _construct(texts, j)
        return [OPEN, *inner, CLOSE], nxt
    return [OPEN, texts[j], CLOSE], j + 1


def _construct(texts, i):
    tok = texts[i]
    if tok in (SUP, SUB):
        arg, nxt = _argument(texts, i + 1, tok, MalformedScript)
        return [tok, *arg], nxt
    if tok == SQRT:
        if i + 1 < len(texts) and texts[i + 1] == "[":
            raise UnsupportedSyntax(f"\\sqrt with an optional index at {i} is not supported")
        arg, nxt = _argument(texts, i + 1, tok, MalformedSubstructure)
        return [tok, *arg], nxt
    num, mid = _argument(texts, i + 1, tok, MissingFracArgs)
    den, nxt = _argument(texts, mid, tok, MissingFracArgs)
    return [tok, *num, *den], nxt


def _normalize(texts: Sequence[str]) -> list[str]:
    out, i = [], 0
    while i < len(texts):
        if texts[i] in THETA:
            part, i = _construct(texts, i)
            out.extend(part)
        else:
            out.append(texts[i])
            i += 1
    return out


def normalize_texts(texts: Sequence[str]) -> list[str]:
    texts = list(texts)
    _check_balanced(texts)
    return _normalize(texts)


def normalize(seq):
    """Brace every script, radical and fraction argument.

    ``[x, ^, 2]`` becomes ``[x, ^, {, 2, }]``; ``\\frac12`` becomes
    ``\\frac{1}{2}``.  Idempotent.  Accepts a TokenSeq (returns a TokenSeq) or
    a plain list of token strings (returns a list).
    """
    if isinstance(seq, TokenSeq):
        return TokenSeq.from_texts(normalize_texts(seq.texts), seq.vocab)
    return normalize_texts(texts_of(seq))


def parse_latex(source: str, vocab: Vocabulary) -> TokenSeq:
    """Tokenize then normalize."""
    return normalize(tokenize(source, vocab))


def load_vocabulary(path: str | Path | None = None, omega: Iterable[str] | None = None) -> Vocabulary:
    if path is None:
        return Vocabulary.default(omega)
    return Vocabulary.from_file(path, omega)
