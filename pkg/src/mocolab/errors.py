"""Exception hierarchy shared by every mocolab module."""


class MocoLabError(Exception):
    """Base class for all library errors."""


class DimensionError(MocoLabError, ValueError):
    pass


class ContractError(MocoLabError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateShardError(MocoLabError, ValueError):
    pass


class DegenerateFeatureError(MocoLabError, ValueError):
    pass


class CorruptionError(MocoLabError, RuntimeError):
    pass


class DivergenceError(MocoLabError, FloatingPointError):
    pass


class FormatError(MocoLabError, ValueError):
    """A file did not match the expected binary layout."""


class TruncatedFileError(MocoLabError, OSError):
    pass


class ConsistencyError(MocoLabError, ValueError):
    pass


class ConfigError(MocoLabError, ValueError):
    pass
