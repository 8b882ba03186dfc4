class DlabError(Exception):
    """Base class for every failure raised by the lab."""


class ShapeError(DlabError, ValueError):
    pass


class GraphError(DlabError):
    pass


class UnknownPrimitiveError(DlabError, KeyError):
    def __init__(self, name: str):
        super().__init__(f"primitive '{name}' is not registered")
        self.name = name

    def __str__(self):
        return self.args[0]


class LatentError(DlabError, ValueError):
    pass


class FactorError(DlabError, ValueError):
    pass


class ConfigError(DlabError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class FormatError(DlabError):
    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class DivergenceError(DlabError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


class InsufficientDataError(DlabError, ValueError):
    pass


class ObservationError(DlabError, ValueError):
    pass
