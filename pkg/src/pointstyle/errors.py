"""Exception hierarchy shared by every module."""


class PointStyleError(Exception):
    """Base class; the CLI turns these into a structured stderr message."""


class BehindCameraError(PointStyleError):
    pass


class InvalidDepthError(PointStyleError):
    pass


class SceneLoadError(PointStyleError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class PoseValidationError(PointStyleError):
    pass


class SpecError(PointStyleError):
    pass


class SizeError(PointStyleError):
    pass


class EmptyCloudError(PointStyleError):
    pass


class ParameterError(PointStyleError):
    pass


class TemplateError(PointStyleError):
    pass


class DegenerateInputError(PointStyleError):
    pass


class NumericError(PointStyleError):
    pass


class EmptyRenderError(PointStyleError):
    pass


class ShapeError(PointStyleError):
    pass


class ConfigError(PointStyleError):
    pass


class FormatError(PointStyleError):
    pass
