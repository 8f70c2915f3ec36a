"""Square functions: continuous, tensor, partial, discrete and localized."""

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import GridError
from .filters import FilterBank, TensorFilterBank, expand_multiplier, inverse_spectrum, iter_bands, spectrum
from .grid import Collection, DyadicCube, GridFunction, expand_blocks, restrict
from .models import GridSpec

logger = logging.getLogger(__name__)

Coefficient = Union[complex, np.ndarray]
CoefficientMap = Mapping[DyadicCube, Coefficient]


@dataclass(frozen=True)
class SquareFunctionResult:
    """Nonnegative square function samples and the object that produced them."""
    function: GridFunction
    provenance: str

    @property
    def values(self) -> np.ndarray:
        return self.function.values


# --- Continuous square functions ---

def _factor_mean_leak(f_hat: np.ndarray, bank: FilterBank) -> float:
    """Relative spectral energy of f on frequencies that vanish on the factor."""
    index = [slice(None)] * f_hat.ndim
    for a in bank.axes:
        index[a] = slice(0, 1)
    total = float(np.sum(np.abs(f_hat) ** 2))
    return float(np.sum(np.abs(f_hat[tuple(index)]) ** 2)) / total if total > 0 else 0.0


def _square_sum(f: GridFunction, banks: Sequence[FilterBank]) -> np.ndarray:
    """sum over scale tuples of |f * (psi^1_{k_1} x ... x psi^m_{k_m})|^2."""
    spec = f.spec
    for bank in banks:
        if bank.spec != spec:
            raise GridError(f"function grid {spec.levels} does not match bank grid {bank.spec.levels}")
    axes = sorted(a for bank in banks for a in bank.axes)
    if len(set(axes)) != len(axes):
        raise ValueError("selected factors overlap")
    ndim = f.values.ndim
    f_hat = spectrum(f.values, axes)
    for j, bank in enumerate(banks):
        leak = _factor_mean_leak(f_hat, bank)
        if leak > 1e-20:
            logger.debug(f"Factor {j} carries {leak:.2e} of the energy at zero frequency; those modes are annihilated.")

    total = np.zeros(f.values.shape)
    for ks in itertools.product(*(bank.scales for bank in banks)):
        multiplier = np.ones((1,) * ndim)
        for bank, k in zip(banks, ks):
            multiplier = multiplier * expand_multiplier(bank.psi_hat(k), bank.axes, ndim)
        band = inverse_spectrum(f_hat * multiplier, axes)
        total += np.abs(band) ** 2
    return total


def _band_energy(f: GridFunction, bank: Union[FilterBank, TensorFilterBank]) -> np.ndarray:
    """sum_k |f * psi_k|^2 over every scale (tuple) of the bank."""
    total = np.zeros(f.values.shape)
    for _, band in iter_bands(f, bank):
        total += np.abs(band) ** 2
    return total


def _result(f: GridFunction, squared: np.ndarray, provenance: str) -> SquareFunctionResult:
    return SquareFunctionResult(GridFunction(f.spec, np.sqrt(squared), f.vector_shape), provenance)


def square_function(f: GridFunction, bank: FilterBank) -> SquareFunctionResult:
    """(sum_k |f * psi_k|^2)^{1/2}, per vector index."""
    return _result(f, _band_energy(f, bank), f"bank:{bank.profile}:{bank.axes}")


def tensor_square_function(f: GridFunction, tbank: TensorFilterBank) -> SquareFunctionResult:
    """N-parameter square function over every scale tuple of the tensor bank."""
    squared = _band_energy(f, tbank)
    logger.debug(f"Tensor square function over {len(tbank.factors)} factors on grid {f.spec.levels}.")
    return _result(f, squared, f"tensor:{tuple(b.axes for b in tbank.factors)}")


def partial_square_function(f: GridFunction, tbank: TensorFilterBank, factors: Sequence[int]) -> SquareFunctionResult:
    """Square sum over the scales of the selected factors only."""
    selection = sorted(set(factors))
    if not selection:
        raise ValueError("partial_square_function needs a nonempty factor selection")
    if selection[0] < 0 or selection[-1] >= len(tbank.factors):
        raise ValueError(f"factor indices {selection} outside 0..{len(tbank.factors) - 1}")
    banks = [tbank.factors[j] for j in selection]
    return _result(f, _square_sum(f, banks), f"partial:{tuple(selection)}")


def inductive_square_function(f: GridFunction, tbank: TensorFilterBank) -> SquareFunctionResult:
    """(sum_k |S_{first N-1 factors}(f * psi^N_k)|^2)^{1/2}, evaluated band by band."""
    *rest, last = tbank.factors
    ndim = f.values.ndim
    f_hat = spectrum(f.values, last.axes)
    total = np.zeros(f.values.shape)
    for k in last.scales:
        band = inverse_spectrum(f_hat * expand_multiplier(last.psi_hat(k), last.axes, ndim), last.axes)
        g = GridFunction(f.spec, band, f.vector_shape)
        total += _square_sum(g, rest) if rest else np.abs(band) ** 2
    return _result(f, total, "inductive")


# --- Discrete square functions ---

def coefficient_shape(coeffs: CoefficientMap) -> Tuple[int, ...]:
    for value in coeffs.values():
        return np.shape(value)
    return ()


class SquareSumTables:
    """Per-scale tables of sum |a_I|^2/|I| over the cubes of one scale.

    `suffix(j)` is sum_{k >= j} of the expanded tables: restricted to a cube C0
    of scale j it is the square of the square function localized to C0.
    """

    def __init__(self, coeffs: CoefficientMap, c: Collection, spec: GridSpec, vector_shape: Optional[Tuple[int, ...]] = None):
        extra = [cube.cube_id for cube in coeffs if cube not in c]
        if extra:
            raise ValueError(f"{len(extra)} coefficient(s) for cubes outside the collection, e.g. {extra[0]}")
        self.spec = spec
        self.collection = c
        self.vector_shape = coefficient_shape(coeffs) if coeffs or vector_shape is None else tuple(vector_shape)
        d = spec.dimension
        self.tables: Dict[int, np.ndarray] = {}
        for cube, value in coeffs.items():
            if cube.dimension != d or cube.scale > spec.max_scale:
                raise GridError(f"cube {cube.cube_id} cannot be resolved on grid {spec.levels}")
            value = np.asarray(value)
            if value.shape != self.vector_shape:
                raise ValueError(f"coefficient of {cube.cube_id} has shape {value.shape}, expected {self.vector_shape}")
            table = self.tables.get(cube.scale)
            if table is None:
                table = np.zeros((1 << cube.scale,) * d + self.vector_shape)
                self.tables[cube.scale] = table
            table[cube.position] += np.abs(value) ** 2 / cube.measure
        self._suffix: Dict[int, np.ndarray] = {}

    @property
    def scales(self) -> List[int]:
        return sorted(self.tables)

    def suffix(self, j: int) -> np.ndarray:
        if j not in self._suffix:
            total = np.zeros(self.spec.shape + self.vector_shape)
            for k in self.scales:
                if k >= j:
                    total = total + expand_blocks(self.tables[k], self.spec, k)
            self._suffix[j] = total
        return self._suffix[j]

    def iter_suffixes(self) -> Iterator[Tuple[int, np.ndarray]]:
        """(j, suffix(j)) for j from the finest scale down to 0, built incrementally."""
        total = np.zeros(self.spec.shape + self.vector_shape)
        finest = max(self.scales, default=0)
        for j in range(finest, -1, -1):
            if j in self.tables:
                total = total + expand_blocks(self.tables[j], self.spec, j)
            yield j, total

    def full(self) -> np.ndarray:
        return self.suffix(0)

    def local_block(self, I0: DyadicCube) -> np.ndarray:
        """Squared localized square function on the cells of I0."""
        return self.suffix(I0.scale)[I0.slices(self.spec)]

    def local(self, I0: DyadicCube) -> np.ndarray:
        out = np.zeros(self.spec.shape + self.vector_shape)
        window = I0.slices(self.spec)
        out[window] = self.suffix(I0.scale)[window]
        return out


def discrete_square_function(coeffs: CoefficientMap, c: Collection, spec: GridSpec) -> SquareFunctionResult:
    """(sum_{I in c} |a_I|^2 / |I| 1_I)^{1/2}; cubes of c without a coefficient count as zero."""
    tables = SquareSumTables(coeffs, c, spec)
    values = np.sqrt(tables.full())
    return SquareFunctionResult(GridFunction(spec, values, tables.vector_shape), f"discrete:{len(c)}")


def localized_square_function(
    coeffs: CoefficientMap, c: Collection, Q0: DyadicCube, spec: GridSpec
) -> SquareFunctionResult:
    """Discrete square function over {I in c : I inside Q0}."""
    local = restrict(c, Q0)
    kept = {cube: value for cube, value in coeffs.items() if cube in local}
    tables = SquareSumTables(kept, local, spec, coefficient_shape(coeffs))
    values = np.sqrt(tables.full())
    return SquareFunctionResult(GridFunction(spec, values, tables.vector_shape), f"localized:{Q0.cube_id}")
