"""Exception hierarchy shared across the package."""


class PCNetError(Exception):
    pass


class DegenerateHomography(PCNetError, ValueError):
    pass


class PointAtInfinity(PCNetError, ValueError):
    pass


class ShapeError(PCNetError, ValueError):
    pass


class ConfigError(PCNetError, ValueError):
    pass


class DataError(PCNetError):
    pass


class MissingModality(DataError):
    pass


class MissingGroundTruth(DataError):
    pass


class DecodeError(DataError):
    pass


class EmptyDataset(DataError):
    pass


class NonFiniteLoss(PCNetError, FloatingPointError):
    def __init__(self, batch_id, value):
        super().__init__(f"non-finite loss {value} at batch {batch_id}")
        self.batch_id = batch_id
        self.value = value
