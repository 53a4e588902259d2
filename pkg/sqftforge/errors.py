class ForgeError(Exception):
    pass


class ShapeError(ForgeError, ValueError):
    pass


class DataError(ForgeError, ValueError):
    pass


class ConfigError(ForgeError):
    pass


class InvariantError(ForgeError):
    pass


class TrainingError(ForgeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = list(history)


class FormatError(ForgeError, ValueError):
    def __init__(self, message, offset=None, tensor=None):
        where = []
        if tensor is not None:
            where.append(f"tensor {tensor!r}")
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.tensor = tensor


class StageError(ForgeError):
    def __init__(self, stage, error):
        super().__init__(f"{stage}: {error}")
        self.stage = stage
        self.error = error


__all__ = (
    'ConfigError',
    'DataError',
    'ForgeError',
    'FormatError',
    'InvariantError',
    'ShapeError',
    'StageError',
    'TrainingError',
)
