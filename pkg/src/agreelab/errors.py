"""Exception types shared across the package."""


class AgreementLabError(Exception):
    """Base class for every error raised by agreelab."""


class ZeroMassCell(AgreementLabError):
    pass


class DimensionMismatch(AgreementLabError):
    pass


class InvalidDistribution(AgreementLabError):
    pass


class InvalidPartition(AgreementLabError):
    pass


class InconsistentObservation(AgreementLabError):
    """The observed message is not producible by any sender cell."""


class NotStronglyConnected(AgreementLabError):
    pass


class InvalidChannel(AgreementLabError):
    pass


class RoundCapExceeded(AgreementLabError):
    pass


class MalformedPosterior(AgreementLabError):
    pass


class InstanceTooLarge(AgreementLabError):
    pass


class BudgetExceeded(AgreementLabError):
    pass


class DegenerateSubtree(AgreementLabError):
    """Every node weight in the consulted tree level is zero."""


class ParameterOutOfRange(AgreementLabError):
    pass


class ZeroPosteriorOnChain(AgreementLabError):
    pass


class ConfigInvalid(AgreementLabError):
    pass


class MissingResults(AgreementLabError):
    pass
