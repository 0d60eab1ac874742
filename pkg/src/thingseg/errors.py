"""Exception hierarchy. CLI exit codes hang off these classes."""


class ThingsegError(Exception):
    exit_code = 1


class ConfigError(ThingsegError):
    """Invalid configuration (taxonomy, manifest, experiment fields)."""

    exit_code = 2


class ValidationError(ConfigError):
    pass


class DataError(ThingsegError):
    exit_code = 3


class FormatError(DataError):
    """Scan or label bytes do not follow the on-disk layout."""


class ConsistencyError(DataError):
    """Two inputs that must agree (scan/labels, clean/augmented) do not."""


class DegenerateInputError(DataError):
    pass


class VersioningError(DataError):
    """Checkpoint incompatible with this version or with the taxonomy."""


class TaxonomyLookupError(ThingsegError, KeyError):
    pass


class NotReadyError(ThingsegError):
    """A prototype target depends on classes the bank has not seen yet."""


class NumericError(ThingsegError):
    exit_code = 4
