class UsageException(Exception):
    pass


class ConfigException(UsageException):
    pass


class ShapeMismatchException(UsageException):
    pass


class EmptyCorpusException(UsageException):
    pass


class GlyphTooLargeException(UsageException):
    pass


class NumericalFailureException(Exception):
    pass


class DomainException(NumericalFailureException):
    pass


class NonFiniteException(NumericalFailureException):
    pass


class DivergenceException(NumericalFailureException):
    pass


class DetachedTapeException(NumericalFailureException):
    pass


class GradientCheckException(NumericalFailureException):
    pass


class StorageException(Exception):
    pass


class CheckpointFormatException(StorageException):
    pass


class ImageFormatException(StorageException):
    pass
