"""Exception taxonomy shared across the package.

The CLI maps ``KernvalError`` (and subclasses) to exit code 1 and
``SingularKernelError`` to exit code 2.
"""


class KernvalError(Exception):
    """Base class for all validation and data errors raised by this package."""


class DataError(KernvalError):
    """Malformed or inconsistent user input (files, labels, indices, flags)."""


class KernelFormatError(KernvalError):
    """Base class for kernel-file load failures."""


class BadMagicError(KernelFormatError):
    pass


class VersionMismatchError(KernelFormatError):
    pass


class TruncatedPayloadError(KernelFormatError):
    pass


class TrailingBytesError(KernelFormatError):
    pass


class NonFiniteEntryError(KernelFormatError):
    pass


class SingularKernelError(KernvalError):
    """A kernel sub-block could not be inverted, even with maximum jitter.

    Carries the last condition estimate and the jitter level that was tried,
    plus (for Monte-Carlo runs) whatever partial results were accumulated
    before the abort.
    """

    def __init__(self, message, condition_estimate=float("inf"),
                 applied_jitter=0.0, partial=None):
        super().__init__(message)
        self.condition_estimate = condition_estimate
        self.applied_jitter = applied_jitter
        self.partial = partial
