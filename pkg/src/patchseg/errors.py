"""Exception types shared across the package."""


class PatchsegError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PatchsegError):
    """Invalid configuration: bad flags, missing paths, inconsistent options."""


class DataError(PatchsegError):
    """Malformed or inconsistent input data (files, manifests, masks)."""
