class ShapeError(ValueError):
    """Extents that are invalid or do not agree with each other."""


class SpecError(ValueError):
    """A network description whose layers do not chain."""


class LabelError(ValueError):
    pass


class FormatError(ValueError):
    """A dataset or checkpoint file that does not follow its binary format."""


class TruncatedFileError(FormatError):
    pass


class ConsistencyError(ValueError):
    pass


class DataMissingError(FileNotFoundError):
    pass
