"""Error types shared across the simulator."""


class ConfigurationError(ValueError):
    """A parameter or scenario value is outside its allowed range."""


class ScheduleError(RuntimeError):
    """Pulse/frame timing arithmetic cannot be satisfied."""
