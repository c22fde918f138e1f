"""Exception types shared across flickerlens."""


class FlickerLensError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FlickerLensError, ValueError):
    pass


class DomainError(FlickerLensError, ValueError):
    pass


class ConfigError(FlickerLensError, ValueError):
    pass


class FormatError(FlickerLensError, ValueError):
    pass


class InputError(FlickerLensError, ValueError):
    pass
