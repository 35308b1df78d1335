"""Exception types raised across the package."""


class CausalPOError(Exception):
    """Base class for all package errors."""


class EnumerationTooLarge(CausalPOError):
    pass


class EmptyCorpus(CausalPOError):
    pass


class AlreadyObservational(CausalPOError):
    pass


class SingularDesign(CausalPOError):
    pass


class ZeroSupport(CausalPOError):
    """A sample has zero probability under the randomization density (overlap violated)."""


class NonFiniteWeight(CausalPOError):
    pass


class MissingInput(CausalPOError):
    pass


class DivergenceDetected(CausalPOError):
    pass


class MissingArtifact(CausalPOError):
    pass


class ConfigError(CausalPOError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class SampleSplittingWarning(UserWarning):
    """The outcome model was fit on the same dataset the estimator is evaluated on."""
