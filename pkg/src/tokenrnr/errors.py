"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, InvariantError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad file, inconsistent fields, unusable combination."""


class InvariantError(RuntimeError):
    """A runtime invariant was violated mid-run (non-finite state, checksum drift...)."""
