"""Exception hierarchy shared by every phase."""


class SSJoinError(Exception):
    """Base class for all engine errors."""


class FormatError(SSJoinError):
    pass


class SizeMismatch(FormatError):
    pass


class InconsistentDim(FormatError):
    pass


class UnsupportedElem(FormatError):
    pass


class IoFailure(SSJoinError):
    pass


class MTooLarge(SSJoinError):
    pass


class NonFiniteInput(SSJoinError):
    pass


class BudgetInfeasible(SSJoinError):
    pass


class BudgetExceeded(SSJoinError):
    pass


class CorruptExtent(SSJoinError):
    pass


class CapacityTooSmall(SSJoinError):
    pass


class TooLarge(SSJoinError):
    pass


class PlanMismatch(SSJoinError):
    pass


class LTooSmallWarning(UserWarning):
    """The farthest returned candidate still passes the triangle filter."""
