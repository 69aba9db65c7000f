"""Exception types raised across the package."""


class CatKDError(Exception):
    pass


class InputShapeError(CatKDError, ValueError):
    pass


class HeadShapeError(CatKDError, ValueError):
    pass


class ProvenanceError(CatKDError, ValueError):
    """A CamStack is in the wrong transform state for the requested operation."""


class TransformOrderError(ProvenanceError):
    pass


class InvalidTargetError(CatKDError, ValueError):
    pass


class PolicyError(CatKDError, ValueError):
    pass


class IncompatibleStacksError(CatKDError, ValueError):
    pass


class LabelError(CatKDError, ValueError):
    pass


class ConfigError(CatKDError, ValueError):
    pass


class DataMissingError(CatKDError, FileNotFoundError):
    pass


class DivergenceError(CatKDError, RuntimeError):
    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


class PlotError(CatKDError, ValueError):
    pass
