"""Exception hierarchy shared by every module."""


class EmbraceNetError(Exception):
    pass


class ConfigurationError(EmbraceNetError):
    """Invalid layer chain, fusion settings or run configuration."""


class InputError(EmbraceNetError):
    """Data handed to an operation does not satisfy its contract."""


class InternalError(EmbraceNetError):
    """Broken internal contract (stale caches, mismatched buffers)."""


class ShapeError(InternalError):
    """Shape mismatch between paired forward/backward buffers."""


class ManifestError(EmbraceNetError):
    pass


class FormatError(EmbraceNetError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class TrainingError(EmbraceNetError):
    """Raised when training has to abort (non-finite loss or gradient)."""


class CheckpointError(EmbraceNetError):
    pass
