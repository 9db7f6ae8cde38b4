"""Position-forest encoding of LaTeX expressions, attention correction and a toy decoder."""

from .errors import PosForestError
from .forest import (
    ID_VOCAB,
    ForestTargets,
    IdentifierMatrix,
    build_identifier_matrix,
    derive_targets,
    encode_forest,
    expression_complexity,
    stratify,
)
from .forest_oracle import oracle_encode
from .lexer import (
    DEFAULT_OMEGA,
    SymbolClass,
    Token,
    TokenSeq,
    Vocabulary,
    classify,
    detokenize,
    normalize,
    parse_latex,
    tokenize,
)
from .metrics import MetricsReport, edit_distance, evaluate

__version__ = "0.1.0"

__all__ = [
    "PosForestError",
    "ID_VOCAB",
    "ForestTargets",
    "IdentifierMatrix",
    "build_identifier_matrix",
    "derive_targets",
    "encode_forest",
    "expression_complexity",
    "stratify",
    "oracle_encode",
    "DEFAULT_OMEGA",
    "SymbolClass",
    "Token",
    "TokenSeq",
    "Vocabulary",
    "classify",
    "detokenize",
    "normalize",
    "parse_latex",
    "tokenize",
    "MetricsReport",
    "edit_distance",
    "evaluate",
]
