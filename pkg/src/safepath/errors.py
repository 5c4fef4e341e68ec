"""Exception types shared across the pipeline."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""


class ParseError(ValueError):
    """Generator output could not be parsed into candidate paths.

    ``bad_indices`` lists the 1-based path numbers that failed, when known.
    """

    def __init__(self, message, bad_indices=()):
        super().__init__(message)
        self.bad_indices = tuple(bad_indices)


class BackendError(RuntimeError):
    """An external model backend failed (transport or HTTP status)."""


class AdapterError(RuntimeError):
    """A backend answered, but no usable option letters were found.

    ``raw_tokens`` carries the first-position token dump for debugging.
    """

    def __init__(self, message, raw_tokens=None):
        super().__init__(message)
        self.raw_tokens = raw_tokens
