"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`ApparelReidError`, and carries a short ``category`` used by the CLI
when printing the one-line failure message.
"""


class ApparelReidError(Exception):
    category = "error"


class ContractViolation(ApparelReidError, ValueError):
    category = "contract"


class IngestionError(ApparelReidError, OSError):
    category = "ingestion"


class ChannelError(IngestionError):
    category = "channel"


class NumericFault(ApparelReidError, FloatingPointError):
    category = "numeric"


class ConfigurationError(ApparelReidError, ValueError):
    category = "config"


class DependencyError(ApparelReidError, FileNotFoundError):
    """A stage was started before the stage producing its inputs."""

    category = "dependency"


class EvaluationError(ApparelReidError, ValueError):
    category = "evaluation"


class CheckpointError(ApparelReidError, ValueError):
    category = "checkpoint"


class NoDonorError(ApparelReidError, ValueError):
    category = "synthesis"
