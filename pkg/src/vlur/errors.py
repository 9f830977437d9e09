"""Exception hierarchy. The CLI prints ``<ClassName>: <message>`` on failure."""


class VLURError(Exception):
    pass


class ParameterError(VLURError, ValueError):
    pass


class ShapeError(VLURError, ValueError):
    pass


class ConfigError(VLURError, ValueError):
    pass


class DataError(VLURError):
    pass


class ClassificationError(VLURError):
    pass


class BackendError(VLURError):
    pass


class ProtocolError(VLURError):
    pass


class TrainingDivergedError(VLURError):
    pass


class CheckpointError(VLURError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
