"""Exception hierarchy shared by all solver modules."""


class PPHomogError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PPHomogError):
    """Invalid coefficient set, unknown coefficient id, or bad run options."""


class DomainError(PPHomogError, ValueError):
    """Numeric argument outside its admissible range (e.g. eps <= 0)."""


class AssemblyError(PPHomogError):
    """Discrete operator assembly failed (e.g. non-positive diffusion sample)."""


class SolverError(PPHomogError):
    """Linear solver failed to reach the requested residual tolerance."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class StepError(PPHomogError):
    """A time step could not be completed (e.g. singular I + dt*L)."""


class PicardError(PPHomogError):
    """Fixed-point coupling iteration did not converge."""

    def __init__(self, message, iteration_history=None):
        super().__init__(message)
        self.iteration_history = list(iteration_history or [])


class ConfigFileError(PPHomogError):
    """Run-configuration file missing or unreadable."""


class ConfigSyntaxError(PPHomogError):
    """Run-configuration file is not well-formed TOML."""


class ConfigSemanticsError(PPHomogError):
    """Run-configuration violates schema constraints; carries all violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.violations))
