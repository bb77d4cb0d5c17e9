"""Exception hierarchy shared by every module."""


class VoxequivError(Exception):
    """Base class for all library errors."""


class SpecError(VoxequivError, ValueError):
    """An invalid configuration or parameter value."""


class ParseError(VoxequivError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ElementError(VoxequivError, ValueError):
    def __init__(self, symbol):
        self.symbol = symbol
        super().__init__(f"unsupported element {symbol!r}")


class ShapeError(VoxequivError, ValueError):
    pass


class ExtentError(VoxequivError, ValueError):
    def __init__(self, message, atom_index=None):
        self.atom_index = atom_index
        super().__init__(message)


class DivergenceError(VoxequivError, FloatingPointError):
    def __init__(self, message, step=None, epoch=None):
        self.step = step
        self.epoch = epoch
        super().__init__(message)


class ConventionError(VoxequivError, ValueError):
    """Matched-rotated noise requested for a rotation without an exact grid action."""


class CapabilityError(VoxequivError, TypeError):
    pass


class LabelError(VoxequivError, ValueError):
    pass


class CategoryError(VoxequivError, ValueError):
    """Categorical distributions over different category sets."""
