"""Exception types shared across the package."""


class BsdelabError(Exception):
    """Base class for all package errors."""


class InputError(BsdelabError, ValueError):
    """Invalid argument, configuration, or problem description."""


class NumericalError(BsdelabError, ArithmeticError):
    """Non-finite values or a numerical routine that failed to converge."""


class EllipticityError(NumericalError):
    """A coefficient matrix violated positive definiteness."""


class IllPosedError(InputError):
    """A regression problem with fewer samples than basis functions."""
