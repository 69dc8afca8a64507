"""Exception hierarchy shared by all modules."""


class QDiffusionError(Exception):
    """Base class for every error raised by the package."""


class DegenerateSpectrum(QDiffusionError):
    pass


class NonHermitianCoupling(QDiffusionError):
    pass


class ZeroDispersion(QDiffusionError):
    pass


class StripViolation(QDiffusionError):
    pass


class EmptyShell(QDiffusionError):
    pass


class MissingMeasure(QDiffusionError):
    pass


class ZeroEscape(QDiffusionError):
    pass


class NotConverged(QDiffusionError):
    pass


class SingularSolve(QDiffusionError):
    pass


class InsufficientData(QDiffusionError):
    pass


class QuadratureFail(QDiffusionError):
    pass


class NotIsolated(QDiffusionError):
    pass


class CurvatureUnstable(QDiffusionError):
    pass


class WindowOverflow(QDiffusionError):
    pass


class LabelGap(QDiffusionError):
    pass


class HypothesisViolated(QDiffusionError):
    pass


class QuadratureBudget(QDiffusionError):
    pass


class MissingSubset(QDiffusionError):
    pass


class ConfigError(QDiffusionError):
    pass


class ResourceCap(QDiffusionError):
    pass


class MissingArtifact(QDiffusionError):
    pass


class GapCollapse(UserWarning):
    """Subleading spectrum of an RG state left the small-gap budget.

    Issued as a warning: the flow keeps going and the state records the event.
    """
