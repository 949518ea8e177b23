"""Exception hierarchy shared by all tamperscope modules."""


class TamperscopeError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(TamperscopeError, ValueError):
    """A caller-supplied parameter is out of its documented range."""


class ColorspaceError(TamperscopeError, TypeError):
    """An image arrived in the wrong colorspace for an operation."""


class TransformError(TamperscopeError):
    """An affine transform is singular or otherwise unusable."""


class FeatureError(TamperscopeError):
    """Feature detection cannot run on the given image."""


class IndexBuildError(TamperscopeError):
    """The descriptor index cannot be built from the given input."""


class FormatError(TamperscopeError):
    """A file is truncated, corrupt, or has the wrong magic/version."""


class IndexFormatError(FormatError):
    """An index file is truncated, corrupt, or has the wrong version."""


class QueryError(TamperscopeError):
    """An index query was issued with unusable inputs."""


class RegistrationInfeasibleError(TamperscopeError):
    """Too few correspondences survive matching to attempt registration.

    Carries the partial match list so callers can inspect what was found.
    """

    def __init__(self, message: str, matches=None):
        super().__init__(message)
        self.matches = matches if matches is not None else []


class DegenerateGeometryError(TamperscopeError):
    """Every sampled correspondence set was collinear; no model exists."""


class ComparatorError(TamperscopeError):
    """A comparison algorithm received incompatible or degenerate images."""


class EvaluationError(TamperscopeError):
    """An evaluation routine received inputs it cannot score."""


class NoContextError(TamperscopeError):
    """No retrieved image registers well enough to serve as comparison context."""


class ConfigError(TamperscopeError):
    """The pipeline configuration is incomplete or inconsistent."""


class DegenerateImageWarning(UserWarning):
    """An image yielded too few keypoints to be reliably searchable."""
