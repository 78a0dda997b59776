class MapforgeError(Exception):
    pass


class DegenerateGeometry(MapforgeError, ValueError):
    """Input geometry has zero arc length or too few distinct points."""


class ShapeMismatch(MapforgeError, ValueError):
    pass


class InvalidCost(MapforgeError, ValueError):
    """Cost matrix is not square or contains a non-finite entry."""


class CapacityExceeded(MapforgeError, ValueError):
    pass


class EmptyGeometry(MapforgeError, ValueError):
    pass


class GenerationFailed(MapforgeError, RuntimeError):
    """A scene recipe could not be realized inside its perception range."""


class DivergenceDetected(MapforgeError, FloatingPointError):
    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
