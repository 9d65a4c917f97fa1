"""
Exception hierarchy for the pipeline. Every error carries the offending name
(column, field, stage) so the CLI can log it without parsing messages.
"""


class RiskforgeError(Exception):
    """Base class; the CLI turns any of these into a nonzero exit status."""

    def __init__(self, name=None, reason=""):
        self.name = name
        self.reason = reason
        text = f"{name}: {reason}" if name is not None and reason else (reason or str(name))
        super().__init__(text)


# --- tabular ---
class MissingColumn(RiskforgeError):
    pass


class IoFailure(RiskforgeError):
    pass


class KeyMissing(RiskforgeError):
    pass


class NonNumericColumn(RiskforgeError):
    pass


# --- cohort / harmonization ---
class EmptyCohort(RiskforgeError):
    pass


class MissingIntime(RiskforgeError):
    pass


class MissingDischtime(RiskforgeError):
    pass


class UnlinkedEvent(RiskforgeError):
    pass


class ComponentOutOfRange(RiskforgeError):
    pass


# --- imputation ---
class AllMissingColumn(RiskforgeError):
    pass


class SingularDesign(RiskforgeError):
    pass


class LayoutMismatch(RiskforgeError):
    pass


# --- text ---
class EmptyCorpus(RiskforgeError):
    pass


class ConvergenceFailure(RiskforgeError):
    pass


# --- glm / lasso / gbt ---
class Separation(RiskforgeError):
    """Perfect separation; `fit` holds the non-converged GlmFit."""

    def __init__(self, name=None, reason="", fit=None):
        super().__init__(name, reason)
        self.fit = fit


class SingularHessian(RiskforgeError):
    pass


class ConstantColumn(RiskforgeError):
    pass


class NonConvergence(RiskforgeError):
    pass


class DegenerateFold(RiskforgeError):
    pass


class NoValidSplit(RiskforgeError):
    pass


# --- scoring / evaluation ---
class OutOfRange(RiskforgeError):
    pass


class SingleClass(RiskforgeError):
    pass


class TooFewRows(RiskforgeError):
    pass


# --- synth / cli ---
class InfeasiblePrevalence(RiskforgeError):
    pass


class MissingArtifact(RiskforgeError):
    pass


class ConfigInvalid(RiskforgeError):
    pass
