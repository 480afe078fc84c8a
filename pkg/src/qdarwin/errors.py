"""Exception types shared across the package."""


class StateValidityError(ValueError):
    """An operator fails the density-operator checks (Hermitian, unit trace, PSD)."""


class ResourceCapError(RuntimeError):
    """A dense construction would exceed the configured Hilbert-dimension cap."""

    def __init__(self, needed: int, cap: int, what: str = "dimension"):
        self.needed = needed
        self.cap = cap
        super().__init__(f"{what} {needed} exceeds cap-dim {cap}")


class InvariantError(RuntimeError):
    """An internal consistency check failed after a computation."""
