"""Exception types shared across the pipeline.

Every error carries a short machine-readable ``kind`` plus optional source
position, which the CLI renders as ``{"error": {...}}``.
"""


class SaccError(Exception):
    kind = "error"

    def __init__(self, message, line=None, col=None):
        super().__init__(message)
        self.message = message
        self.line = line
        self.col = col

    def to_dict(self):
        return {"kind": self.kind, "line": self.line, "col": self.col, "message": self.message}


class FunctionLikeMacro(SaccError):
    kind = "FunctionLikeMacro"

    def __init__(self, name, line):
        super().__init__(f"function-like macro {name!r} is not supported", line, 1)
        self.name = name


class UnterminatedComment(SaccError):
    kind = "UnterminatedComment"


class UnknownCharacter(SaccError):
    kind = "UnknownCharacter"

    def __init__(self, char, line, col):
        super().__init__(f"unknown character {char!r}", line, col)
        self.char = char


class CSyntaxError(SaccError):
    kind = "SyntaxError"

    def __init__(self, expected, found, line, col):
        super().__init__(f"expected {expected}, found {found!r}", line, col)
        self.expected = expected
        self.found = found


class EmptyProgram(SaccError):
    kind = "EmptyProgram"


class ShapeMismatch(SaccError, ValueError):
    kind = "ShapeMismatch"

    def __init__(self, expected, got):
        super().__init__(f"shape mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class EmptyReduction(SaccError, ValueError):
    kind = "EmptyReduction"


class NotScalar(SaccError, ValueError):
    kind = "NotScalar"


class IndexOutOfRange(SaccError, IndexError):
    kind = "IndexOutOfRange"


class NotSymmetric(SaccError, ValueError):
    kind = "NotSymmetric"


class LengthMismatch(SaccError, ValueError):
    kind = "LengthMismatch"


class OddDimension(SaccError, ValueError):
    kind = "OddDimension"


class ZeroLength(SaccError, ValueError):
    kind = "ZeroLength"


class EmptyCorpus(SaccError, ValueError):
    kind = "EmptyCorpus"


class LabelOutOfRange(SaccError, ValueError):
    kind = "LabelOutOfRange"


class MissingGradient(SaccError):
    kind = "MissingGradient"


class ManifestNotFound(SaccError, FileNotFoundError):
    kind = "ManifestNotFound"


class AllSamplesFailed(SaccError):
    kind = "AllSamplesFailed"


class EmptyTrainSplit(SaccError):
    kind = "EmptyTrainSplit"


class EmptySplit(SaccError):
    kind = "EmptySplit"


class ConfigError(SaccError):
    kind = "ConfigError"


class CheckpointError(SaccError):
    kind = "CheckpointError"
