"""Error types shared across the package."""


class GELabError(Exception):
    """Base class for all package errors."""


class StructuralError(GELabError):
    """Malformed input (wrong shape, asymmetry, odd dimension, bad schema)."""


class PhysicalityError(GELabError):
    """Input is well formed but violates a physicality requirement."""


class ConditioningError(GELabError):
    """Matrix too ill-conditioned for the requested decomposition."""


class CutoffLeakError(GELabError):
    """Truncation leak exceeds the configured budget.

    Carries ``required_dim`` when a dimension estimate is available.
    """

    def __init__(self, msg, required_dim=None):
        super().__init__(msg)
        self.required_dim = required_dim


class DimensionLimitError(GELabError):
    """Requested dense object exceeds the hard product-dimension cap."""


class EnvelopeFailureError(GELabError):
    """Rejection-sampler acceptance rate collapsed below the floor."""


class GridResolutionError(GELabError):
    """Grid sampler leaves more probability mass outside the grid than allowed."""


class EstimationAbortError(GELabError):
    """Moment estimation declared failure (nudged matrix still unphysical)."""


class CandidateExplosionError(GELabError):
    """Candidate stream too large to enumerate; carries log2_size."""

    def __init__(self, msg, log2_size=None):
        super().__init__(msg)
        self.log2_size = log2_size


class SchemaError(StructuralError):
    """JSON descriptor violates the documented schema."""
