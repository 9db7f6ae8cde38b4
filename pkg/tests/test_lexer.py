import pytest
from hypothesis import given, strategies as st

from posforest.errors import (
    MalformedScript,
    MissingFracArgs,
    UnbalancedBraces,
    UnknownToken,
    UnsupportedSyntax,
    UnterminatedCommand,
)
from posforest.lexer import (
    SymbolClass,
    Vocabulary,
    classify,
    classify_text,
    detokenize,
    lex,
    normalize,
    parse_latex,
    tokenize,
)


@pytest.mark.parametrize(
    "src, expected",
    [
        ("y^{3}_{1}", ["y", "^", "{", "3", "}", "_", "{", "1", "}"]),
        ("\\frac{1}{4}", ["\\frac", "{", "1", "}", "{", "4", "}"]),
        ("\\beta_{1}", ["\\beta", "_", "{", "1", "}"]),
        ("a + b", ["a", "+", "b"]),
        ("\\{ x \\}", ["\\{", "x", "\\}"]),
    ],
)
def test_tokenize_examples(vocab, src, expected):
    assert tokenize(src, vocab).texts == expected


def test_lex_offsets():
    assert lex("a \\alpha") == [(0, "a"), (2, "\\alpha")]


def test_unknown_token_reports_offset(vocab):
    with pytest.raises(UnknownToken) as info:
        tokenize("x + \\foo", vocab)
    assert info.value.position == 4
    assert info.value.lexeme == "\\foo"


def test_trailing_backslash(vocab):
    with pytest.raises(UnterminatedCommand):
        tokenize("x\\", vocab)


@pytest.mark.parametrize(
    "text, cls",
    [("^", SymbolClass.STRUCTURE), ("{", SymbolClass.STRUCTURE), ("4", SymbolClass.ENTITY),
     ("\\frac", SymbolClass.ENTITY), ("\\sqrt", SymbolClass.ENTITY)],
)
def test_default_classes(vocab, text, cls):
    assert classify_text(text, vocab) is cls
    assert classify(vocab.token(text), vocab) is cls


def test_omega_override(vocab):
    v = vocab.with_omega(["^", "_", "{", "}", "\\frac"])
    assert classify_text("\\frac", v) is SymbolClass.STRUCTURE
    assert classify_text("\\frac", vocab) is SymbolClass.ENTITY


def test_reserved_ids(vocab):
    assert (vocab.pad_id, vocab.sos_id, vocab.eos_id) == (0, 1, 2)
    assert vocab.from_id(vocab.id_of("x")).text == "x"


def test_from_lines_sections():
    v = Vocabulary.from_lines(["[entity]", "a", "b", "\\sqrt", "\\frac", "[structure]", "^", "_", "{", "}"])
    assert v.omega == frozenset({"^", "_", "{", "}"})
    assert "a" in v and "[sos]" in v


@pytest.mark.parametrize(
    "src, expected",
    [
        ("x^2", "x ^ { 2 }"),
        ("x^{2}", "x ^ { 2 }"),
        ("\\sum_{i}^{n}", "\\sum _ { i } ^ { n }"),
        ("\\frac12", "\\frac { 1 } { 2 }"),
        ("x^\\frac{1}{2}", "x ^ { \\frac { 1 } { 2 } }"),
        ("\\sqrt x", "\\sqrt { x }"),
    ],
)
def test_normalize_examples(vocab, src, expected):
    assert " ".join(normalize(tokenize(src, vocab)).texts) == expected


@pytest.mark.parametrize(
    "src, exc",
    [("x^", MalformedScript), ("x_}", UnbalancedBraces), ("\\frac{1}", MissingFracArgs),
     ("\\sqrt[3]{x}", UnsupportedSyntax), ("{x", UnbalancedBraces)],
)
def test_normalize_errors(vocab, src, exc):
    with pytest.raises(exc):
        normalize(tokenize(src, vocab))


_ATOMS = st.sampled_from(["a", "x", "2", "+", "\\alpha"])


@st.composite
def _latex(draw, depth=2):
    parts = []
    for _ in range(draw(st.integers(1, 3))):
        kind = draw(st.sampled_from(["atom", "sup", "sub", "frac", "sqrt"] if depth else ["atom"]))
        if kind == "atom":
            parts.append(draw(_ATOMS))
        elif kind in ("sup", "sub"):
            arg = draw(_latex(depth=depth - 1))
            op = "^" if kind == "sup" else "_"
            parts.append(f"{draw(_ATOMS)}{op}{{{arg}}}")
        elif kind == "frac":
            parts.append(f"\\frac{{{draw(_latex(depth=depth - 1))}}}{{{draw(_latex(depth=depth - 1))}}}")
        else:
            parts.append(f"\\sqrt{{{draw(_latex(depth=depth - 1))}}}")
    return " ".join(parts)


@given(_latex())
def test_normalize_idempotent_and_detokenize_roundtrip(src):
    v = Vocabulary.default()
    once = normalize(tokenize(src, v))
    assert normalize(once) == once
    assert tokenize(detokenize(once), v) == once
    assert parse_latex(src, v) == once
