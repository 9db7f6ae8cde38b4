"""Reference position-forest encoder built from an explicit parse tree.

This deliberately shares no code with :mod:`posforest.forest`.  The
expression is parsed by recursive descent into nodes (plain groups, scripts,
radicals, fractions), and every token is then labelled with the root-to-node
path of the tree it hangs off.  ``encode_forest`` must agree with it on every
well-formed input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import MalformedSubstructure, NestingTooDeep, UnbalancedBraces
from .lexer import texts_of

_BRANCH = {"^": "L", "_": "R", "\\sqrt": "R"}


@dataclass
class Leaf:
    index: int


@dataclass
class Group:
    """``{ ... }``: the braces sit at the same tree position as the body."""

    open_index: int
    close_index: int
    body: list = field(default_factory=list)


@dataclass
class Attach:
    """``^``, ``_`` or ``\\sqrt`` followed by one group, hung off branch L or R."""

    index: int
    branch: str
    arg: Group


@dataclass
class Fraction:
    index: int
    num: Group
    den: Group


class _Parser:
    def __init__(self, texts):
        self.texts = texts
        self.pos = 0

    def peek(self):
        return self.texts[self.pos] if self.pos < len(self.texts) else None

    def sequence(self, inside_group):
        nodes = []
        while True:
            tok = self.peek()
            if tok is None:
                if inside_group:
                    raise UnbalancedBraces("group not closed before end of input")
                return nodes
            if tok == "}":
                if not inside_group:
                    raise UnbalancedBraces(f"unmatched '}}' at {self.pos}")
                return nodes
            nodes.append(self.node())

    def group(self):
        if self.peek() != "{":
            raise MalformedSubstructure(f"expected '{{' at {self.pos}, found {self.peek()!r}")
        start = self.pos
        self.pos += 1
        body = self.sequence(inside_group=True)
        end = self.pos
        self.pos += 1
        return Group(start, end, body)

    def node(self):
        tok = self.peek()
        here = self.pos
        if tok == "{":
            return self.group()
        if tok in _BRANCH:
            self.pos += 1
            return Attach(here, _BRANCH[tok], self.group())
        if tok == "\\frac":
            self.pos += 1
            num = self.group()
            den = self.group()
            return Fraction(here, num, den)
        self.pos += 1
        return Leaf(here)


def parse_forest(seq) -> list:
    """Parse a normalized sequence into a list of top-level nodes."""
    return _Parser(texts_of(seq)).sequence(inside_group=False)


def _label(nodes, path, out):
    for node in nodes:
        if isinstance(node, Leaf):
            out[node.index] = path
        elif isinstance(node, Group):
            out[node.open_index] = path
            out[node.close_index] = path
            _label(node.body, path, out)
        elif isinstance(node, Attach):
            child = path + node.branch
            out[node.index] = child
            _label([node.arg], child, out)
        else:
            upper, lower = path + "L", path + "R"
            out[node.index] = upper
            _label([node.num], upper, out)
            _label([node.den], lower, out)


def oracle_encode(seq, max_nesting: int | None = 3) -> list[str]:
    texts = texts_of(seq)
    out = [None] * len(texts)
    _label(parse_forest(texts), "M", out)
    if max_nesting is not None:
        for t, ident in enumerate(out):
            if len(ident) - 1 > max_nesting:
                raise NestingTooDeep(t, len(ident) - 1, max_nesting)
    return out
