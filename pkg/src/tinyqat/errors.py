"""Exception taxonomy shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform to an operation's signature."""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf or otherwise left the numeric contract."""


class ContractError(ValueError):
    """An API precondition was violated by the caller."""


class ConfigError(ValueError):
    """Bad configuration value, scheme string, or flag combination."""


class InputError(ValueError):
    """Invalid runtime input (token ids, labels, empty corpus, ...)."""


class CapacityError(RuntimeError):
    """A bounded buffer (e.g. the KV cache) is full."""


class CheckpointError(RuntimeError):
    """Malformed or incompatible checkpoint / dataset file."""
