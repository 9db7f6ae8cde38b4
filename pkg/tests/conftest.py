import pytest

from posforest.corpus import GrammarConfig, generate, render_expression
from posforest.lexer import Vocabulary

# the toy training corpus: depth-2 expressions sized for a 16x16 grid
TOY_GRAMMAR = GrammarConfig(max_depth=2, max_items=3, max_tokens=24, seed=42)


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture(scope="session")
def toy_samples(vocab):
    return [render_expression(e) for e in generate(TOY_GRAMMAR, 50, vocab)]


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
