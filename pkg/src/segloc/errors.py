"""Exception hierarchy shared by every module."""


class SegLocError(Exception):
    pass


class InvalidArgumentError(SegLocError, ValueError):
    pass


class ContractViolation(SegLocError):
    """A caller broke a documented precondition (shape, range, stale cache)."""


class DegenerateSegmentError(SegLocError):
    pass


class PlacementError(SegLocError):
    pass


class EmptyRegionError(SegLocError):
    """No object pixels survive erosion and thresholding."""


class IngestError(SegLocError):
    pass


class CorpusInvalidError(SegLocError):
    pass


class SynthesisError(SegLocError):
    pass


class EmptyNegativesError(SegLocError):
    pass


class InitializationError(SegLocError):
    pass


class InvalidDatasetError(SegLocError):
    pass


class CheckpointError(SegLocError):
    pass
