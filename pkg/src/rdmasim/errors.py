"""Exception types shared across the simulator."""


class RdmaSimError(Exception):
    """Base class for all simulator errors."""


class UnknownDeviceError(RdmaSimError):
    pass


class ClosedContextError(RdmaSimError):
    pass


class InvalidLengthError(RdmaSimError):
    pass


class IllegalTransitionError(RdmaSimError):
    pass


class MissingRemoteParamsError(RdmaSimError):
    pass


class QueueDepthError(RdmaSimError):
    pass


class UnregisteredFunctionError(RdmaSimError):
    pass


class ProcessStateError(RdmaSimError):
    pass


class UnknownPidError(RdmaSimError):
    pass


class QpPoolExhaustedError(RdmaSimError):
    pass


class UnknownContainerError(RdmaSimError):
    pass


class TableOwnershipError(RdmaSimError):
    pass


class InitAbortError(RdmaSimError):
    pass


class InjectedFaultError(RdmaSimError):
    """Raised by test/fault hooks planted inside control-plane subroutines."""
