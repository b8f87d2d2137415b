"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid hyperparameter or run configuration."""


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive or a parameter layout."""


class ContractError(RuntimeError):
    """A caller-side precondition was violated (e.g. missing gradient)."""
