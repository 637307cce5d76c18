"""Exception types shared across the package."""


class CarbonSchedError(Exception):
    """Base class for all package errors."""


class DomainError(CarbonSchedError, ValueError):
    """An argument is outside the domain an operation is defined on."""


class TraceRangeError(CarbonSchedError, IndexError):
    """A slot index or window falls outside the available trace."""


class ParseError(CarbonSchedError, ValueError):
    """An input file violates its schema.

    Carries the offending path and 1-based row number so CLI messages can
    point at the exact line.
    """

    def __init__(self, path, row, message):
        self.path = path
        self.row = row
        super().__init__(f"{path}:{row}: {message}")


class InstanceTooLargeError(CarbonSchedError, RuntimeError):
    """Exhaustive search refused: the instance exceeds the state budget."""


class EmptyKnowledgeBaseError(CarbonSchedError, RuntimeError):
    """Queried a knowledge base before the learning phase stored any case."""


class InfeasibleError(CarbonSchedError, RuntimeError):
    """A pipeline step requires a feasible schedule and none exists."""
