"""Exception types shared across the toolkit."""


class ThinnerError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ThinnerError):
    """Tensor or kernel shapes are inconsistent with an operation."""


class GraphError(ThinnerError):
    """A model graph violates a structural invariant."""


class ModelFormatError(ThinnerError):
    """A model manifest or blob file is malformed or corrupt."""


class DatasetFormatError(ThinnerError):
    """A dataset file is malformed, truncated, or inconsistent."""


class SiteError(ThinnerError):
    """No valid pruning site exists at the requested layer."""


class SamplingError(ThinnerError):
    """Sample collection is impossible at the requested site."""


class SelectionError(ThinnerError):
    """Channel selection was called with invalid arguments."""


class SurgeryError(ThinnerError):
    """Structural pruning would produce an inconsistent network."""


class JunctionConstraintError(SurgeryError):
    """Pruning would break the equal-shape constraint of an add junction."""

    def __init__(self, junction_id, message=None):
        self.junction_id = junction_id
        super().__init__(message or f"pruning would break add_junction {junction_id!r}")


class TrainingDivergedError(ThinnerError):
    """The training loss became non-finite."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
