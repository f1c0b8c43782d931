from typing import Optional


class GaSsdError(Exception):
    pass


class DimensionError(GaSsdError):
    def __init__(self, message: str, axis: Optional[str] = None) -> None:
        super().__init__(message if axis is None else f"{message} (axis {axis})")
        self.axis = axis


class ConfigurationError(GaSsdError):
    pass


class VolumeFormatError(GaSsdError):
    def __init__(self, message: str, field: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class PayloadLengthError(VolumeFormatError):
    def __init__(self, expected: int, actual: int) -> None:
        super().__init__(f"expected {expected} scalars, found {actual}", field="payload")
        self.expected = expected
        self.actual = actual


class GenerationError(GaSsdError):
    pass


class ManifestError(GaSsdError):
    pass


class TrainingError(GaSsdError):
    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step


class DataError(GaSsdError):
    pass
