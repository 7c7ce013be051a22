"""Exception types raised across the package."""


class SlamError(Exception):
    """Base class for every error raised by cbknn_slam."""


class BehindCamera(SlamError):
    """Point lies at or behind the camera plane; callers treat it as culled."""


class InvalidDepth(SlamError):
    pass


class DimensionMismatch(SlamError):
    pass


class NonFinite(SlamError):
    """A gradient came out NaN or Inf."""


class EmptyNeighborhood(SlamError):
    pass


class EmptyFrame(SlamError):
    """Frame has no valid depth pixel to initialize from."""


class TrackingDiverged(SlamError):
    """Final tracking loss exceeded the allowed multiple of the initial loss.

    ``pose`` carries the predicted pose the caller should fall back to.
    """

    def __init__(self, message, pose=None, initial_loss=None, final_loss=None):
        super().__init__(message)
        self.pose = pose
        self.initial_loss = initial_loss
        self.final_loss = final_loss


class LengthMismatch(SlamError):
    pass


class MissingIndexFile(SlamError):
    pass


class NoAssociations(SlamError):
    pass


class VersionMismatch(SlamError):
    pass


class CorruptFile(SlamError):
    pass


class TransienceViolation(SlamError):
    """A corrected render changed the persistent map."""
