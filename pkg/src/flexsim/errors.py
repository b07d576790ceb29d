"""Exception types shared across the flexsim package."""


class FlexError(Exception):
    """Base class for all flexsim errors."""


class FormatError(FlexError, ValueError):
    """Malformed ``flexN+M`` string or out-of-bounds bit widths."""


class ExponentOutOfRange(FlexError, ValueError):
    pass


class EmptyTensor(FlexError, ValueError):
    pass


class ShapeMismatch(FlexError, ValueError):
    pass


class ExponentMismatch(FlexError, ValueError):
    pass


class UninitializedSlot(FlexError, RuntimeError):
    """A write kernel or ``adjust_scale`` ran against a slot that never finished initialization."""


class EmptyHistory(FlexError, ValueError):
    pass


class InvalidSpec(FlexError, ValueError):
    pass


class InitDivergence(RuntimeWarning):
    """Exponent initialization hit its iteration cap on a tensor that is not all zeros.

    Issued as a warning; the slot is still marked initialized at its current scale.
    """
