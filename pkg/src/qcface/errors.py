"""Exception hierarchy. Every error carries a short stable ``code`` used by the CLI."""


class QCFaceError(Exception):
    """Base class for all qcface errors."""

    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class MeshParseError(QCFaceError):
    code = "parse"


class NonTriangularFaceError(QCFaceError):
    code = "non-triangular"


class NonManifoldEdgeError(QCFaceError):
    code = "non-manifold"


class InconsistentOrientationError(QCFaceError):
    code = "orientation"


class InvalidMeshError(QCFaceError):
    code = "invalid-mesh"


class MeshTopologyError(QCFaceError):
    """Raised when a mesh has the wrong topology for an operation (closed, not a disk, ...)."""

    code = "topology"


class IsolatedVertexError(QCFaceError):
    code = "isolated-vertex"


class DegenerateMapError(QCFaceError):
    """A face of a map has vanishing conformal factor (f_z = 0)."""

    code = "degenerate-conformal-factor"


class OrientationViolatedError(QCFaceError):
    """A Beltrami coefficient with |mu| >= 1 where admissibility is required."""

    code = "orientation-violated"


class InadmissibleFieldError(QCFaceError):
    code = "inadmissible-mu"


class InsufficientConstraintsError(QCFaceError):
    code = "insufficient-constraints"


class SolverConvergenceError(QCFaceError):
    code = "solver-convergence"


class FlippedFacesError(QCFaceError):
    code = "flipped-faces"


class EmptyOverlapError(QCFaceError):
    code = "empty-overlap"


class ProjectionFoldError(QCFaceError):
    code = "projection-fold"


class UnderConstrainedError(QCFaceError):
    code = "under-constrained"


class NoComparableFeaturesError(QCFaceError):
    code = "no-comparable-features"


class DegeneratePartialError(QCFaceError):
    code = "degenerate-partial"


class HolePlacementError(QCFaceError):
    code = "hole-placement"


class ConfigError(QCFaceError):
    code = "config"
