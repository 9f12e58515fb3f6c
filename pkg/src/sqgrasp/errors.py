"""Exception types shared across the toolkit."""


class SqGraspError(Exception):
    """Base class for all toolkit-specific failures."""


class EmptyCloud(SqGraspError):
    """An operation received a point cloud with no points."""


class DegenerateCloud(SqGraspError):
    """Too few usable points were supplied, or too few survived filtering."""


class DegenerateGeometry(SqGraspError):
    """Input geometry is rank-deficient (collinear/coplanar) for the solver."""


class PoleSingularity(SqGraspError):
    """Surface-normal gradient vanished at a parametrization pole."""


class NoFeasibleGrasp(SqGraspError):
    """Every candidate closing span exceeds the gripper opening."""


class EmptyCandidates(SqGraspError):
    """A candidate list that must be non-empty was empty."""


class PlacementFailure(SqGraspError):
    """Scene generation failed to place a single object."""


class IoFailure(SqGraspError):
    """File read/write failed; message carries the offending path."""


class IdMismatch(SqGraspError):
    """Prediction/ground-truth object ids do not line up."""


class ParseError(SqGraspError):
    """A point-cloud file is malformed."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")
