"""Exception hierarchy. Every error carries the CLI exit code it maps to."""


class GridMarketError(Exception):
    exit_code = 1


class ConfigError(GridMarketError, ValueError):
    exit_code = 2


class ConfigParseError(ConfigError):
    pass


class ValidationError(ConfigError):
    def __init__(self, message, entity=None):
        if entity is not None:
            message = f"{entity}: {message}"
        super().__init__(message)
        self.entity = entity


class DisconnectedGraph(ValidationError):
    pass


class IntegrationError(GridMarketError):
    exit_code = 4


class StateDomainError(IntegrationError, ValueError):
    """A voltage left the admissible domain E > eps_E."""


class VoltageCollapse(StateDomainError):
    pass


class NonConvergence(IntegrationError):
    pass


class RegularityLoss(IntegrationError):
    pass


class NonFiniteState(IntegrationError):
    pass


class EquilibriumError(GridMarketError):
    exit_code = 3

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NewtonNonConvergence(EquilibriumError):
    pass


class InfeasibleAngles(EquilibriumError):
    pass


class DomainViolation(EquilibriumError):
    pass


class CriteriaUnmet(GridMarketError):
    exit_code = 5
