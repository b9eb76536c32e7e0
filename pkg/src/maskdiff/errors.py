"""Exception hierarchy. ``category`` is what the CLI reports on failure."""


class MaskDiffError(Exception):
    category = "error"


class ContractError(MaskDiffError, ValueError):
    """A precondition of a public operation was violated."""

    category = "contract"


class NonFiniteError(MaskDiffError, FloatingPointError):
    category = "non_finite"


class DivergenceError(MaskDiffError):
    """Sampling left the bounded envelope; ``partial`` carries whatever was produced."""

    category = "divergence"

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class CorruptFileError(MaskDiffError):
    category = "corrupt_file"


class VersionMismatchError(MaskDiffError):
    category = "version_mismatch"


class ConfigError(MaskDiffError):
    category = "config"


class MissingCheckpointError(MaskDiffError, FileNotFoundError):
    category = "missing_checkpoint"


class ConfigMismatchError(MaskDiffError):
    """Resuming a checkpoint under a config whose hash differs from the saved one."""

    category = "config_mismatch"
