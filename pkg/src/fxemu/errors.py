"""Exception hierarchy shared by all modules."""


class FxEmuError(Exception):
    """Base class for every error raised by this package."""


class DomainError(FxEmuError, ValueError):
    """A numeric argument is outside the domain of an operation."""


class ShapeError(FxEmuError, ValueError):
    pass


class GraphError(FxEmuError):
    """The graph is malformed (cycle, dangling tensor, bad join)."""


class PipelineError(FxEmuError):
    """A pass could not make the graph exactly emulatable."""

    def __init__(self, message, node_id=None, step=None):
        super().__init__(message)
        self.node_id = node_id
        self.step = step

    def __str__(self):
        msg = super().__str__()
        where = []
        if self.step is not None:
            where.append(f"step {self.step}")
        if self.node_id is not None:
            where.append(f"node {self.node_id!r}")
        return f"{msg} ({', '.join(where)})" if where else msg


class ContractViolation(FxEmuError):
    """The engine was handed a graph/annotation that breaks its preconditions."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class ConfigError(FxEmuError, ValueError):
    pass


class ModelFormatError(FxEmuError):
    """Base class for serialization failures."""


class VersionError(ModelFormatError):
    pass


class ManifestError(ModelFormatError):
    pass


class BlobIndexError(ModelFormatError):
    """The weight index disagrees with the binary blob."""


class RangeValidationError(ModelFormatError):
    """A stored integer lies outside its declared QuantParams range."""
