"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated a documented precondition (bad shape, empty input, ...)."""


class ConfigError(ValueError):
    """A config file or flag value could not be parsed or is out of range."""
