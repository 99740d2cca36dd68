"""Exception types raised by the engine."""


class UsageError(ValueError):
    """Bad arguments or violated preconditions (CLI exit status 2)."""


class ModelError(RuntimeError):
    """A model function returned something the engine cannot use (e.g. NaN)."""


class LRPSExhausted(RuntimeError):
    """The constrained sampler could not find a point above the threshold."""


class RegionStale(RuntimeError):
    """Too many consecutive region proposals were rejected; the region needs a refit."""


class WalkError(RuntimeError):
    """A slice walk collapsed its bracket without finding an acceptable point."""


class CheckpointError(RuntimeError):
    """A checkpoint file cannot be used for resuming."""
