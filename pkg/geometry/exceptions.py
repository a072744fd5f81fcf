"""
Exception hierarchy shared by every toolkit module.

Each class carries a stable ``code`` used in JSON diagnostics and a
``details`` dict with machine-readable context.
"""


class SpectralToolkitError(Exception):
    code = 'toolkit_error'

    def __init__(self, message, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def as_dict(self):
        return {'code': self.code, 'message': self.message, 'details': self.details}


class GridMismatchError(SpectralToolkitError):
    code = 'grid_mismatch'


class MetricNotPositiveDefinite(SpectralToolkitError):
    code = 'metric_not_positive_definite'

    def __init__(self, message, location=None, **details):
        super().__init__(message, location=location, **details)
        self.location = location


class MeshError(SpectralToolkitError):
    code = 'mesh_error'


class SolverConvergenceError(SpectralToolkitError):
    code = 'solver_convergence'

    def __init__(self, message, iterations=None, **details):
        super().__init__(message, iterations=iterations, **details)
        self.iterations = iterations


class EmptyWindowError(SpectralToolkitError):
    code = 'empty_window'


class DegenerateClusterError(SpectralToolkitError):
    code = 'degenerate_cluster'

    def __init__(self, message, multiplicity=None, **details):
        super().__init__(message, multiplicity=multiplicity, **details)
        self.multiplicity = multiplicity


class OrthonormalityError(SpectralToolkitError):
    code = 'not_orthonormal'


class ContourError(SpectralToolkitError):
    """An eigenvalue sits too close to the integration contour."""
    code = 'contour_too_close'


class SingularResolventError(SpectralToolkitError):
    code = 'singular_resolvent'


class NeighbourhoodError(SpectralToolkitError):
    """The transfer map is no longer invertible on the reference eigenspace."""
    code = 'left_neighbourhood'


class TrackingError(SpectralToolkitError):
    code = 'tracking_failed'


class ExperimentAborted(SpectralToolkitError):
    code = 'experiment_aborted'
