"""Exception hierarchy shared by every subpackage."""


class LowRankTPError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LowRankTPError, ValueError):
    pass


class RankError(LowRankTPError, ValueError):
    pass


class InputError(LowRankTPError, ValueError):
    pass


class ParameterError(LowRankTPError, ValueError):
    pass


class PlanError(LowRankTPError, ValueError):
    pass


class ConfigError(LowRankTPError, ValueError):
    pass


class PartitionError(LowRankTPError, ValueError):
    pass


class CollectiveError(LowRankTPError, RuntimeError):
    pass


class CapacityError(LowRankTPError, RuntimeError):
    pass


class PayloadError(LowRankTPError, ValueError):
    pass


class SequenceLookupError(LowRankTPError, KeyError):
    pass


class ReplayError(LowRankTPError, RuntimeError):
    """Raised when the replay stage would allocate or drift from its capture."""


class ReconciliationError(LowRankTPError, AssertionError):
    """Analytic and measured communication volumes disagree."""

    def __init__(self, deltas):
        self.deltas = dict(deltas)
        lines = ", ".join(f"{k}: expected {e}, measured {m}" for k, (e, m) in sorted(self.deltas.items()))
        super().__init__(f"volume mismatch in {len(self.deltas)} sub-layer(s): {lines}")
