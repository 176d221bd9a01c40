class OmniPatchError(Exception):
    pass


class ConfigurationError(OmniPatchError, ValueError):
    """Invalid model, dataset or run configuration."""


class ParameterError(OmniPatchError, ValueError):
    pass


class DomainError(OmniPatchError, ValueError):
    pass


class ContractError(OmniPatchError):
    """A component was handed something that breaks its interface contract."""


class LoadError(OmniPatchError):
    pass


class IngestionError(OmniPatchError):
    def __init__(self, message, offenders=()):
        self.offenders = list(offenders)
        if self.offenders:
            message = f"{message}: {', '.join(map(str, self.offenders))}"
        super().__init__(message)


class UndefinedLossError(OmniPatchError, ValueError):
    pass


class UndefinedMetricError(OmniPatchError, ValueError):
    pass


class NumericError(OmniPatchError, FloatingPointError):
    pass


class DivergenceError(NumericError):
    """Raised when a training step produces a non-finite loss.

    ``snapshot`` carries whatever state was available at the failing step.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class PatchFormatError(OmniPatchError, ValueError):
    pass
