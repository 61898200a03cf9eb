"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad user input: malformed files, inconsistent parameters, unmet preconditions."""


class ArtifactError(RuntimeError):
    """Bad or missing upstream artifact: wrong magic, fingerprint mismatch, stale models."""


class DivergenceError(RuntimeError):
    """Network training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class HygieneError(AssertionError):
    """A protocol exposed held-out data to model training."""
