"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value is structurally unusable (bad intrinsics, overlapping regions, ...)."""


class InputError(ValueError):
    """Runtime data violates an operation's precondition (NaNs, shape mismatch, ...)."""


class RenderError(RuntimeError):
    """The synthetic renderer hit a degenerate configuration."""


class AdapterError(RuntimeError):
    """An external denoiser adapter is unavailable or timed out."""


class NumericDivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries diagnostics for the failing step."""

    def __init__(self, message, step=None, term=None, batch_ids=None):
        super().__init__(message)
        self.step = step
        self.term = term
        self.batch_ids = batch_ids
