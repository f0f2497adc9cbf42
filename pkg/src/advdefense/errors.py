"""Exception hierarchy shared across the package."""


class AdvDefenseError(Exception):
    """Base class for all package errors."""


class ShapeError(AdvDefenseError):
    """Tensor shapes incompatible with an operation's signature."""


class NumericalOverflowError(AdvDefenseError):
    """An operation produced a non-finite (NaN/Inf) value."""


class DegenerateGradientError(AdvDefenseError):
    """A gradient norm fell below the divide guard (1e-12).

    When raised from an attack loop, ``partial_result`` carries the
    progress made before the degenerate step, so callers that tolerate
    degeneracy (e.g. dataset-level metrics) can keep the partial
    perturbation.
    """

    def __init__(self, message, partial_result=None):
        super().__init__(message)
        self.partial_result = partial_result


class GraphStateError(AdvDefenseError):
    """Graph used out of order (e.g. backward before forward)."""


class ModelFormatError(AdvDefenseError):
    """Malformed model file."""


class IdxFormatError(AdvDefenseError):
    """Malformed IDX file (base class)."""


class IdxMagicError(IdxFormatError):
    """IDX magic number invalid."""


class IdxTruncatedError(IdxFormatError):
    """IDX payload shorter than the header promises."""


class IdxDtypeError(IdxFormatError):
    """IDX dtype code not supported."""


class ConfigError(AdvDefenseError):
    """Invalid experiment configuration; collects every problem found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class DivergenceError(AdvDefenseError):
    """Training loss became non-finite."""
