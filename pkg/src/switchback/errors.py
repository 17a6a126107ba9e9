"""Exception types raised across the package.

Every error carries an ``exit_code`` used by the command line front end.
"""


class SwitchbackError(ValueError):
    exit_code = 1


class SchemaError(SwitchbackError):
    exit_code = 3


class InputError(SwitchbackError):
    exit_code = 4


class EmptyInput(InputError):
    pass


class NonFiniteMetric(InputError):
    pass


class CalendarGapUnresolvable(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class DesignError(SwitchbackError):
    exit_code = 5


class TooFewUnits(DesignError):
    pass


class DegenerateFeatures(DesignError):
    pass


class OddHorizon(DesignError):
    pass


class HorizonTooLong(DesignError):
    pass


class CalibrationError(SwitchbackError):
    exit_code = 6


class ShortPanel(CalibrationError):
    pass


class RankDeficientBasis(CalibrationError):
    pass


class ZeroSeasonality(CalibrationError):
    pass


class DegenerateSeries(CalibrationError):
    pass


class NonPositiveBaseline(CalibrationError):
    pass


class EstimationError(SwitchbackError):
    exit_code = 7


class NotIdentified(EstimationError):
    pass


class SingleCluster(EstimationError):
    pass


class NonPositiveSE(EstimationError):
    pass
