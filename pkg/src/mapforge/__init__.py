"""Vectorized map element modeling, hierarchical matching, losses and Chamfer-AP evaluation."""

from mapforge.errors import (
    CapacityExceeded,
    DegenerateGeometry,
    DivergenceDetected,
    EmptyGeometry,
    GenerationFailed,
    InvalidCost,
    MapforgeError,
    ShapeMismatch,
)
from mapforge.geometry import (
    ElementClass,
    MapElement,
    PerceptionRange,
    PermutationGroup,
    Scene,
    apply_permutation,
    denormalize,
    normalize,
    permutation_group,
    resample,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityExceeded",
    "DegenerateGeometry",
    "DivergenceDetected",
    "ElementClass",
    "EmptyGeometry",
    "GenerationFailed",
    "InvalidCost",
    "MapElement",
    "MapforgeError",
    "PerceptionRange",
    "PermutationGroup",
    "Scene",
    "ShapeMismatch",
    "apply_permutation",
    "denormalize",
    "normalize",
    "permutation_group",
    "resample",
]
