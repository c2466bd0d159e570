"""Exception hierarchy shared by every maskdiff module."""


class MaskDiffError(Exception):
    """Base class for all errors raised by maskdiff."""


class InputError(MaskDiffError, ValueError):
    """Malformed argument: wrong length, token out of vocabulary, overlapping sets."""


class ConstructionError(MaskDiffError):
    """A randomly generated probability table could not be made row-stochastic."""


class EvidenceError(MaskDiffError):
    """Conditioning on an event of probability zero."""


class UnsupportedOperationError(MaskDiffError):
    pass


class CapacityError(MaskDiffError):
    """A state space or enumeration exceeds its configured budget."""


class ScheduleError(MaskDiffError, ValueError):
    pass


class UndefinedPerplexityError(MaskDiffError):
    pass


class ConfigError(MaskDiffError):
    pass


class InfiniteDivergenceError(MaskDiffError, ValueError):
    """A KL divergence is infinite because the reference puts zero mass on a supported point."""
