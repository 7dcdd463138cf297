class FedMateError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FedMateError):
    pass


class PartitionError(FedMateError):
    pass


class NumericalError(FedMateError):
    """A loss or update became non-finite.

    ``round`` and ``client`` are filled in by the caller that knows them.
    """

    def __init__(self, message, round=None, client=None):
        self.round = round
        self.client = client
        ctx = []
        if round is not None:
            ctx.append(f"round={round}")
        if client is not None:
            ctx.append(f"client={client}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
