"""Exception types shared across the package."""


class VoxsegError(Exception):
    """Base class for all package errors."""


class ConfigError(VoxsegError):
    """Invalid experiment configuration; message names the offending key path."""


class BidsIndexError(VoxsegError):
    """Dataset indexing failed (missing root, no matching images, bad metadata)."""


class NiftiError(VoxsegError):
    """NIfTI file could not be read or written."""


class EmptyMaskError(VoxsegError):
    """A binary mask expected to contain foreground is empty."""


class CheckpointError(VoxsegError):
    """Checkpoint missing, corrupt, or incompatible with the current config."""
