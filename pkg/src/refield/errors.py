"""Exception types shared across the package."""


class RefieldError(Exception):
    """Base class for all package errors."""


class OutOfBounds(RefieldError):
    """Query point outside the region an operation is defined on."""


class NoSurface(RefieldError):
    """Ray accumulated too little opacity to yield a surface point."""


class DegenerateNormal(RefieldError):
    """All density gradients sampled around a point vanish."""


class DegenerateGeometry(RefieldError):
    """Shading geometry too close to grazing for a stable derivative."""


class TooFewPoints(RefieldError):
    """Not enough points to build a spatial index."""


class StaleTree(RefieldError):
    """Feature tree lags the optimization state by more than one epoch."""


class NonFiniteLoss(RefieldError):
    """A loss term evaluated to NaN or infinity."""
