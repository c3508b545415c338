"""Exception hierarchy shared by the pipeline stages."""


class PipelineError(Exception):
    """Base class for every error raised by renalwsi."""


class SlideIOError(PipelineError, OSError):
    """A slide file could not be read or decoded."""


class SlideFormatError(PipelineError, ValueError):
    """A slide file is readable but not a supported raster format."""


class AnnotationError(PipelineError, ValueError):
    """An annotation or manifest file is malformed or out of bounds."""


class GeometryError(PipelineError, ValueError):
    """Image dimensions are incompatible with the requested patch grid."""


class ClassificationError(PipelineError):
    """A classifier backend failed or produced an invalid distribution.

    ``coord`` is the ``(x, y)`` of the offending patch when known.
    """

    def __init__(self, message, coord=None):
        if coord is not None:
            message = f"{message} (patch x={coord[0]}, y={coord[1]})"
        super().__init__(message)
        self.coord = coord


class ProtocolError(ClassificationError):
    """The external classifier process violated the line protocol."""


class CalibrationError(PipelineError, ValueError):
    """Threshold calibration cannot run on the given input."""


class ConfigError(PipelineError, ValueError):
    """A pipeline configuration is invalid."""


class PredictionFileError(PipelineError, ValueError):
    """A prediction JSONL line is malformed or carries an invalid distribution."""


class SynthSpecError(PipelineError, ValueError):
    """A synthetic slide specification is inconsistent."""
