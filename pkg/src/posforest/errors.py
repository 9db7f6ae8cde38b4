"""Exception hierarchy shared by every module.

Anything derived from :class:`PosForestError` is a *domain* error: the CLI
reports it verbatim and exits with status 1.
"""


class PosForestError(Exception):
    """Base class for domain errors.

    ``expression_index`` is filled in by corpus-level helpers (``stratify``,
    corpus readers) so a failure can be traced back to its input line.
    """

    expression_index = None

    def __str__(self):
        msg = super().__str__()
        if self.expression_index is not None:
            return f"expression {self.expression_index}: {msg}"
        return msg


# lexer

class UnknownToken(PosForestError):
    def __init__(self, position, lexeme):
        super().__init__(f"unknown token {lexeme!r} at offset {position}")
        self.position = position
        self.lexeme = lexeme


class UnterminatedCommand(PosForestError):
    def __init__(self, position):
        super().__init__(f"trailing backslash without a command name at offset {position}")
        self.position = position


class MalformedScript(PosForestError):
    pass


class MissingFracArgs(PosForestError):
    pass


class UnsupportedSyntax(PosForestError):
    pass


# forest

class UnbalancedBraces(PosForestError):
    pass


class MalformedSubstructure(PosForestError):
    pass


class NestingTooDeep(PosForestError):
    def __init__(self, t, depth, limit):
        super().__init__(f"token {t} reaches nested level {depth}, above the limit {limit}")
        self.t = t
        self.depth = depth
        self.limit = limit


# model

class ShapeMismatch(PosForestError):
    pass


class NonFiniteActivation(PosForestError):
    pass


class NonFiniteGradient(PosForestError):
    pass


class IndexOutOfVocab(PosForestError):
    pass


class CheckpointError(PosForestError):
    pass


# corpus / metrics

class GridOverflow(PosForestError):
    pass


class ParseError(PosForestError):
    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class LengthMismatch(PosForestError):
    pass
