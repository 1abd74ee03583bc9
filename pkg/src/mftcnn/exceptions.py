"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, type)."""


class NonConvergence(RuntimeError):
    """An iterative solver gave up before reaching its stopping rule."""


class DivergedCost(FloatingPointError):
    """A cost evaluation produced a non-finite value."""
