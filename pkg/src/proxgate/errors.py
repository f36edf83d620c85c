"""Exception hierarchy.

Every error carries a ``code`` equal to its class name; the HTTP layer and the
CLI use it as the machine-readable error identifier.
"""


class ProxgateError(Exception):
    http_status = 400

    @property
    def code(self) -> str:
        return type(self).__name__


# registry
class InvalidIdentifiers(ProxgateError):
    pass


class AlreadyRegistered(ProxgateError):
    http_status = 409


class NotFound(ProxgateError):
    http_status = 404


# signal
class SchemaError(ProxgateError):
    pass


class FormatError(ProxgateError):
    pass


class MissingSetting(ProxgateError):
    pass


class InvalidDistance(ProxgateError):
    pass


class InvalidConfig(ProxgateError):
    pass


class IncompleteSession(ProxgateError):
    http_status = 409


class InvalidSample(ProxgateError):
    pass


# ml
class DegenerateLabels(ProxgateError):
    pass


class InvalidData(ProxgateError):
    pass


class InvalidK(ProxgateError):
    pass


class DimensionError(ProxgateError):
    pass


class ModelFormatError(ProxgateError):
    pass


# eval
class EmptyTestSet(ProxgateError):
    pass


class UndefinedMetric(ProxgateError):
    pass


# protocol
class RoleViolation(ProxgateError):
    http_status = 403


class NotSignedIn(ProxgateError):
    http_status = 403


class InvalidTransition(ProxgateError):
    http_status = 409


class Expired(ProxgateError):
    http_status = 410


class ForeignDevice(ProxgateError):
    http_status = 403


class StaleReports(ProxgateError):
    http_status = 422


# store
class IntegrityError(ProxgateError):
    http_status = 500
