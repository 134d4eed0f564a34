"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class SupportError(ValueError):
    """A distribution assigns zero mass where the reference does not."""


class ConvergenceError(RuntimeError):
    """An iterative routine failed to converge within its iteration budget."""


class RankDeficiencyError(ValueError):
    """A matrix required to have full column rank does not."""


class DivergenceError(RuntimeError):
    """Training produced non-finite loss; retry with a lower learning rate."""


class CacheGapError(RuntimeError):
    """A KV commit or batch would leave a positional gap at some layer."""


class PendingCapacityError(RuntimeError):
    """The pending-token ledger is full; the caller must run a full pass."""


class PromptError(ValueError):
    """A prompt is empty, out of vocabulary, or exceeds the position budget."""


class ContainerFormatError(ValueError):
    """A binary container failed to parse.

    Carries the byte offset at which the violation was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
