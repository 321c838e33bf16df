"""Exception hierarchy shared by every module of the package."""


class RelembedError(Exception):
    """Base class for all errors raised by relembed."""


class ParseError(RelembedError):
    """A schema descriptor, data file or model file could not be parsed."""


class ConstraintViolation(RelembedError):
    """A key or foreign-key constraint does not hold.

    ``relation``, ``row`` and ``constraint`` locate the offending fact when
    known; ``row`` is the 1-based data row in the source CSV (header excluded).
    """

    def __init__(self, message, relation=None, row=None, constraint=None):
        super().__init__(message)
        self.relation = relation
        self.row = row
        self.constraint = constraint


class NotFound(RelembedError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class UnknownRelation(RelembedError, KeyError):
    def __str__(self):
        return f"unknown relation: {self.args[0]!r}" if self.args else "unknown relation"


class UnknownAttribute(RelembedError, KeyError):
    def __str__(self):
        return f"unknown attribute: {self.args[0]!r}" if self.args else "unknown attribute"


class RelationMismatch(RelembedError, ValueError):
    pass


class NullOperand(RelembedError, ValueError):
    pass


class NonNumeric(RelembedError, TypeError):
    pass


class NonpositiveVariance(RelembedError, ValueError):
    pass


class DimensionMismatch(RelembedError, ValueError):
    pass


class NonFinite(RelembedError, ValueError):
    pass


class EmptyRelation(RelembedError, ValueError):
    pass


class NoPairs(RelembedError, ValueError):
    """No (walk scheme, attribute) pair exists for the embedded relation."""


class NoUsableConstraints(RelembedError):
    """A new fact shares no completed walk statistics with any embedded fact."""


class MissingEmbedding(RelembedError, KeyError):
    pass


class SingleClass(RelembedError, ValueError):
    pass


class TooFewSamples(RelembedError, ValueError):
    pass
