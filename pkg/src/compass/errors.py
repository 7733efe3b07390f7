"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class InvalidInputError(ValueError):
    """Operation called with arguments violating its contract."""


class ContractViolation(RuntimeError):
    """Internal invariant broken; indicates a caller or planner bug."""


class NumericsError(RuntimeError):
    """Numerical routine failed beyond recoverable jitter."""
