class MRULabError(Exception):
    """실험실 전체의 기본 예외입니다."""


class ShapeMismatchError(MRULabError, ValueError):
    pass


class NonFiniteError(MRULabError, ValueError):
    pass


class ConfigError(MRULabError, ValueError):
    pass


class DatasetFormatError(MRULabError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class CountMismatchError(DatasetFormatError):
    pass


class CheckpointMismatchError(MRULabError):
    pass


class DivergenceError(MRULabError):
    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record  # 진단용 RunRecord


class VerificationError(MRULabError):
    pass
