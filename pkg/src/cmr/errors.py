"""Exception types raised by the cmr package.

Each class corresponds to one failure kind of the library contracts, so
callers (and the experiment harness, which records error kinds per trial)
can dispatch on type rather than parse messages.
"""


class CmrError(Exception):
    """Base class for all cmr errors."""


class NonFinite(CmrError, ValueError):
    """An input array contains NaN or Inf."""


class NotInvertible(CmrError, ValueError):
    """A matrix is too close to singular for a reliable inverse square root."""


class RankDeficient(CmrError, ValueError):
    """A matrix has numerically deficient column rank."""


class NotPsd(CmrError, ValueError):
    """A matrix required to be positive semi-definite is not."""


class ShapeMismatch(CmrError, ValueError):
    """Array shapes are inconsistent with each other or with the model."""


class OutOfDomain(CmrError, ValueError):
    """A scalar argument lies outside the valid domain of a formula."""


class Degenerate(CmrError, ValueError):
    """A quantity that must be strictly positive vanished."""


class EmptyDataset(CmrError, ValueError):
    """A dataset with zero tasks or zero samples was supplied."""


class RankRequest(CmrError, ValueError):
    """The requested rank exceeds what the data can support."""


class Diverged(CmrError, RuntimeError):
    """An iterative solve produced a non-finite objective value."""


class InsufficientSamples(CmrError, ValueError):
    """Not enough samples per class to build the requested split."""


class BadMagic(CmrError, ValueError):
    """An IDX file does not start with a recognized magic number."""


class TruncatedFile(CmrError, ValueError):
    """An IDX file ends before the payload its header promises."""


class DimensionMismatch(CmrError, ValueError):
    """An IDX header declares impossible or unsupported dimensions."""


class NotDivisible(CmrError, ValueError):
    """Image side lengths are not divisible by the requested block size."""
