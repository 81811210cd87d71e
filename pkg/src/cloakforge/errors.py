"""Package-level exception types."""


class CloakforgeError(Exception):
    """Base class for domain errors raised by this package."""


class ArchitectureMismatchError(CloakforgeError):
    """Checkpoint and model disagree on the architecture descriptor."""


class TrainingDivergedError(CloakforgeError):
    """A training loop produced a non-finite loss or gradient."""


class EmbedderAccuracyError(CloakforgeError):
    """Identity embedder failed to reach the required holdout accuracy."""
