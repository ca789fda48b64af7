"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, ContractError -> 4.
"""


class HtdnError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(HtdnError):
    """Invalid or inconsistent run configuration."""


class DataError(HtdnError):
    """Malformed input data: records, images, annotation files."""


class ContractError(HtdnError):
    """An operation was invoked outside its stated contract."""


class ShapeError(ContractError):
    """Dimension mismatch between tensors or network stages."""
