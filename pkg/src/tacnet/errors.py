"""Exception hierarchy shared by every tacnet component."""


class TacnetError(Exception):
    pass


class InvalidInput(TacnetError, ValueError):
    pass


class DegenerateFit(TacnetError, ValueError):
    pass


class RecordLengthError(TacnetError, ValueError):
    pass


class NotRetained(TacnetError, LookupError):
    """Requested flash ids fall outside the retained window."""

    def __init__(self, message, available=None):
        super().__init__(message)
        # (oldest_id, latest_id) or None when the FIFO is empty
        self.available = available


class ProtocolError(TacnetError):
    pass


class IntegrityError(TacnetError):
    pass


class UndefinedRatio(TacnetError, ZeroDivisionError):
    pass


class NoPeak(TacnetError, ValueError):
    pass


class ServiceUnavailable(TacnetError, ConnectionError):
    pass
