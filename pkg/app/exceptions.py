"""Domain errors. All of them are ValueErrors so callers can treat them as bad input."""

from typing import Iterable, Optional


class GridError(ValueError):
    """Shape, grid or budget mismatch."""


class ConfigurationError(ValueError):
    """Invalid filter or experiment configuration."""


class ResolutionError(GridError):
    """One or more cubes are too small for the grid."""

    def __init__(self, cubes: Iterable[str], minimum_cells: int):
        self.cubes = list(cubes)
        self.minimum_cells = minimum_cells
        listing = ", ".join(self.cubes[:20])
        more = f" (+{len(self.cubes) - 20} more)" if len(self.cubes) > 20 else ""
        super().__init__(
            f"{len(self.cubes)} cube(s) below resolution (need >= {minimum_cells} cells per axis): {listing}{more}"
        )


class ContractionError(ValueError):
    """The sampled reconstruction iteration does not contract: N too small."""

    def __init__(self, shift: int, ratio: float):
        self.shift = shift
        self.ratio = ratio
        self.measured_constant = ratio * 2.0 ** shift
        super().__init__(
            f"N too small: measured contraction ratio {ratio:.4g} >= 1 at N={shift} "
            f"(measured C = {self.measured_constant:.4g})"
        )


class BudgetError(ValueError):
    """Exceptional-set budget unattainable."""


class MajorSubsetError(ValueError):
    """Removing the exceptional set left less than half of F: increase C."""


class SparseInvariantError(ValueError):
    """A sparse family failed (or skipped) verification."""


class PreflightError(RuntimeError):
    """An invariant suite failed before an experiment could run."""

    def __init__(self, invariant: str, detail: Optional[str] = None):
        self.invariant = invariant
        self.detail = detail
        super().__init__(f"preflight failed: {invariant}" + (f" ({detail})" if detail else ""))
