import enum


class ErrorCode(enum.IntEnum):
    """ Error codes. Values double as process exit codes. """
    SUCCESS = 0
    RUNTIME_ERROR = 1
    INVALID_INPUT = 2


class ToolkitError(Exception):
    """ Base error. `code` determines the CLI exit status. """
    code = ErrorCode.RUNTIME_ERROR

    def __init__(self, message: str, *, code: ErrorCode | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ArchValidationError(ToolkitError):
    code = ErrorCode.INVALID_INPUT

    def __init__(self, name: str, violations: list):
        self.name = name
        self.violations = list(violations)
        super().__init__(
            f'{name}: architecture has {len(self.violations)} violation(s): '
            + '; '.join(str(v) for v in self.violations)
        )


class UnknownPresetError(ToolkitError):
    code = ErrorCode.INVALID_INPUT


class ShapeError(ToolkitError):
    """ Tensor or weight shape does not match the layer it feeds. """
    code = ErrorCode.INVALID_INPUT

    def __init__(self, layer_id: str, message: str):
        self.layer_id = layer_id
        super().__init__(f'{layer_id}: {message}')


class ChoiceError(ToolkitError):
    code = ErrorCode.INVALID_INPUT


class ShrinkError(ToolkitError):
    code = ErrorCode.INVALID_INPUT


class SearchError(ToolkitError):
    code = ErrorCode.RUNTIME_ERROR


class ScaleMismatchError(ToolkitError):
    code = ErrorCode.INVALID_INPUT


class OksError(ToolkitError):
    code = ErrorCode.INVALID_INPUT


class ArchFormatError(ToolkitError):
    """ Architecture / choice / tensor file does not follow its JSON schema. """
    code = ErrorCode.INVALID_INPUT
