from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posforest.corpus import (
    GrammarConfig,
    generate,
    generate_one,
    glyph_planes,
    read_corpus,
    read_samples,
    read_targets,
    render_expression,
    write_corpus,
    write_samples,
    write_targets,
)
from posforest.errors import GridOverflow, ParseError
from posforest.forest import encode_forest, expression_complexity
from posforest.lexer import THETA, tokenize


def test_depth_zero_has_no_substructure(vocab):
    for e in generate(GrammarConfig(max_depth=0, seed=3), 200, vocab):
        assert not set(e.texts) & set(THETA)


def test_generation_is_pure(vocab):
    cfg = GrammarConfig(max_depth=3, seed=11, grid_budget=None)
    assert generate_one(cfg, 17, vocab) == generate_one(cfg, 17, vocab)
    assert generate(cfg, 5, vocab) == generate(cfg, 5, vocab)


def test_generated_within_budget(vocab):
    cfg = GrammarConfig(max_depth=2, max_items=3, max_tokens=24, seed=42)
    for e in generate(cfg, 100, vocab):
        assert len(e) <= 24
        assert expression_complexity(encode_forest(e)) <= 2
        render_expression(e, 16)


def test_bad_weights_rejected():
    with pytest.raises(ValueError):
        GrammarConfig(structure_weights={"atom": 0.5})


def _cell(sample, token_index):
    return [(r, c) for i, r, c in sample.placements if i == token_index]


def test_atom_centered(vocab):
    s = render_expression(tokenize("a", vocab), 16)
    plane = glyph_planes(vocab)["a"]
    assert np.argwhere(s.grid[:, :, plane]).tolist() == [[7, 7]]
    assert s.grid[:, :, 1:].sum() == 1


def test_superscript_above(vocab):
    s = render_expression(tokenize("x^{2}", vocab))
    assert _cell(s, 3)[0][0] < _cell(s, 0)[0][0]


def test_fraction_stacking(vocab):
    s = render_expression(tokenize("\\frac{1}{4}", vocab))
    bar = _cell(s, 0)[0][0]
    assert _cell(s, 2)[0][0] < bar < _cell(s, 5)[0][0]


def test_grid_overflow(vocab):
    with pytest.raises(GridOverflow):
        render_expression(tokenize("a b c d e", vocab), 4)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_render_preserves_entities(index):
    from posforest.lexer import Vocabulary

    v = Vocabulary.default()
    e = generate_one(GrammarConfig(max_depth=2, seed=5), index, v)
    s = render_expression(e)
    planes = glyph_planes(v)
    entities = [t for t in e.texts if t not in v.omega]
    lit = {p for p in range(1, s.grid.shape[-1]) if s.grid[:, :, p].any()}
    assert lit == {planes[t] for t in entities}
    assert np.all(s.grid.sum(-1) == 1)
    per_token = Counter(i for i, _, _ in s.placements)
    for i, t in enumerate(e.texts):
        if t in v.omega:
            assert per_token[i] == 0
        else:
            assert per_token[i] == 1 or t == "\\frac"


def test_read_corpus_basic(tmp_path, vocab):
    p = tmp_path / "c.tsv"
    p.write_text("")
    assert read_corpus(p, vocab) == []
    p.write_text("e1\ta + b\n")
    [(i, seq)] = read_corpus(p, vocab)
    assert i == "e1" and seq.texts == ["a", "+", "b"]


def test_read_corpus_errors(tmp_path, vocab):
    p = tmp_path / "c.tsv"
    p.write_text("e1\ta\nno-tab-here\n")
    with pytest.raises(ParseError) as info:
        read_corpus(p, vocab)
    assert info.value.line_no == 2
    p.write_text("e1\t\\nope\n")
    with pytest.raises(ParseError):
        read_corpus(p, vocab)


def test_corpus_roundtrip(tmp_path, vocab):
    exprs = generate(GrammarConfig(max_depth=3, seed=9, grid_budget=None), 1000, vocab)
    entries = [(f"e{i}", e) for i, e in enumerate(exprs)]
    write_corpus(tmp_path / "c.tsv", entries)
    assert read_corpus(tmp_path / "c.tsv", vocab) == entries


def test_targets_roundtrip(tmp_path, vocab):
    exprs = generate(GrammarConfig(max_depth=3, seed=2, grid_budget=None), 200, vocab)
    write_targets(tmp_path / "t.tsv", [(f"e{i}", e) for i, e in enumerate(exprs)])
    records = read_targets(tmp_path / "t.tsv", vocab)
    assert [r.latex for r in records] == exprs
    for r in records:
        assert r.identifiers == encode_forest(r.latex)
        assert r.targets.y_n == tuple(len(i) - 1 for i in r.identifiers)


def test_samples_roundtrip(tmp_path, vocab, toy_samples):
    pairs = [(f"s{i}", s) for i, s in enumerate(toy_samples[:10])]
    write_samples(tmp_path / "s.pfrm", pairs)
    back = read_samples(tmp_path / "s.pfrm", vocab)
    assert [i for i, _ in back] == [i for i, _ in pairs]
    for (_, a), (_, b) in zip(pairs, back):
        assert a.latex == b.latex
        assert np.array_equal(a.grid, b.grid)
        assert a.targets == b.targets
