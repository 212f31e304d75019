"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class IqaError(Exception):
    """Base class for all package errors."""


class UsageError(IqaError):
    """Invalid configuration, flags, or argument combinations."""


class DataError(IqaError):
    """Malformed or inconsistent input data (images, caches, manifests)."""


class NumericalError(IqaError):
    """Non-finite values encountered during optimization or inference."""


class CacheError(DataError):
    """Feature-cache file rejected.

    `reason` is one of "bad magic", "bad version", "truncated payload".
    """

    def __init__(self, reason, detail=""):
        self.reason = reason
        msg = reason if not detail else f"{reason}: {detail}"
        super().__init__(msg)
