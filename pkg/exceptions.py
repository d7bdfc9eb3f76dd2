"""Error hierarchy. Validation errors map to exit code 1, everything else to 2."""


class WildsatError(Exception):
    """Base class for every error raised by this project."""


class ValidationError(WildsatError, ValueError):
    """Bad input: configuration, data files, shapes or command-line usage."""

    exit_code = 1


class ConfigError(ValidationError):
    pass


class UsageError(ValidationError):
    pass


class DataError(ValidationError):
    """A data file failed validation; names the file and the record index."""

    def __init__(self, file, message, index=None):
        self.file = file
        self.index = index
        located = message if index is None else f'{message}, row {index}'
        super().__init__(f'{located} ({file})')


class ShapeError(ValidationError):
    def __init__(self, message, node=None):
        self.node = node
        prefix = '' if node is None else f'node {node}: '
        super().__init__(f'{prefix}{message}')


class UnsupportedOpError(ValidationError):
    pass


class DegenerateEmbeddingError(ValidationError):
    def __init__(self, row):
        self.row = row
        super().__init__(f'degenerate embedding row {row}')


class CheckpointError(ValidationError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f'{field}: {message}')


class TrainingDivergedError(WildsatError, RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    exit_code = 2

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f'non-finite loss {loss!r} at step {step}')


def exit_code_for(error):
    return getattr(error, 'exit_code', 2)
