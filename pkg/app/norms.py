"""Mixed-norm and weak quasi-norms, the size functional and averages over dyadic cubes."""

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional, Sequence, Union

import numpy as np
import scipy.fft as sfft

from .config import settings
from .exceptions import GridError
from .grid import Collection, DyadicCube, GridFunction, block_reduce, relevant_closure
from .models import GridSpec, MixedNormSpec, NormRecord, SizeReport
from .square_functions import CoefficientMap, SquareSumTables

logger = logging.getLogger(__name__)

Samples = Union[GridFunction, np.ndarray]


def _values(g: Samples) -> np.ndarray:
    return g.values if isinstance(g, GridFunction) else np.asarray(g)


def _weight_values(weight) -> Optional[np.ndarray]:
    if weight is None:
        return None
    return np.asarray(getattr(weight, "samples", weight), dtype=float)


# --- Mixed norms ---

def reduce_vector(values: np.ndarray, q: Sequence[float]) -> np.ndarray:
    """Iterated L^Q over the trailing vector axes with uniform probability weights, innermost first."""
    out = np.abs(values)
    for exponent in reversed(tuple(q)):
        out = np.mean(out ** exponent, axis=-1) ** (1.0 / exponent)
    return out


def mixed_norm(f: GridFunction, spec: MixedNormSpec, weight=None) -> float:
    """||f||_{L^P(L^Q)}: Q over the vector indices first, then P from the last axis to the first.

    An optional weight multiplies the innermost spatial integral.
    """
    spec.check_shapes(f.spec, f.vector_shape)
    values = np.abs(f.values)
    peak = float(values.max()) if values.size else 0.0
    if peak == 0.0:
        return 0.0
    h = reduce_vector(values / peak, spec.q)
    w = _weight_values(weight)
    if w is not None and w.shape != f.spec.shape:
        raise GridError(f"weight shape {w.shape} does not match grid {f.spec.shape}")
    for axis in range(f.spec.dimension - 1, -1, -1):
        p = spec.p[axis]
        integrand = h ** p
        if w is not None and axis == f.spec.dimension - 1:
            integrand = integrand * w
        h = np.mean(integrand, axis=-1) ** (1.0 / p)
    return float(h) * peak


def lp_norm(f: Samples, spec: GridSpec, p: float, weight=None) -> float:
    """||f||_{L^p(w)} of a scalar sample array."""
    values = np.abs(_values(f))
    if values.shape != spec.shape:
        raise GridError(f"expected scalar samples of shape {spec.shape}, got {values.shape}")
    w = _weight_values(weight)
    peak = float(values.max()) if values.size else 0.0
    if peak == 0.0:
        return 0.0
    integrand = (values / peak) ** p
    if w is not None:
        integrand = integrand * w
    return float(np.mean(integrand)) ** (1.0 / p) * peak


def weak_quasinorm(f: Samples, p: float, spec: Optional[GridSpec] = None) -> float:
    """sup over attained levels s of s |{|f| >= s}|^{1/p}."""
    if not p > 0:
        raise ValueError(f"weak exponent must be positive, got {p}")
    values = np.abs(_values(f)).ravel()
    if spec is None:
        if not isinstance(f, GridFunction):
            raise ValueError("weak_quasinorm of a raw array needs the grid spec")
        spec = f.spec
    levels = np.sort(values)[::-1]
    counts = np.arange(1, levels.size + 1) * spec.cell_measure
    return float(np.max(levels * counts ** (1.0 / p), initial=0.0))


# --- Averages and the size functional ---

def smoothed_average(g: Samples, I0: DyadicCube, decay: float, spec: Optional[GridSpec] = None) -> float:
    """(1/|I0|) integral of g chi-tilde_{I0}."""
    spec = g.spec if isinstance(g, GridFunction) else spec
    if spec is None:
        raise ValueError("smoothed_average of a raw array needs the grid spec")
    values = _values(g)
    window = I0.decay_window(spec, decay)
    return float(np.sum(values * window)) * spec.cell_measure / I0.measure


def _scale_averages(indicator: np.ndarray, spec: GridSpec, scale: int, decay: float) -> np.ndarray:
    """Smoothed averages of every cube of one scale, one FFT correlation for all of them."""
    base = DyadicCube(scale, (0,) * spec.dimension)
    kernel = base.decay_window(spec, decay)
    workers = settings.FFT_WORKERS
    correlation = sfft.ifftn(
        sfft.fftn(indicator, workers=workers) * np.conj(sfft.fftn(kernel, workers=workers)), workers=workers
    ).real
    cells = base.cells_per_axis(spec)
    corners = correlation[tuple(slice(None, None, m) for m in cells)]
    return corners * spec.cell_measure / base.measure


def size_indicator(E: Samples, c: Collection, decay: Optional[float] = None, spec: Optional[GridSpec] = None) -> SizeReport:
    """size of 1_E over the closure of c: the largest smoothed average, with its cube."""
    spec = E.spec if isinstance(E, GridFunction) else spec
    if spec is None:
        raise ValueError("size_indicator of a raw mask needs the grid spec")
    decay = settings.DECAY_EXPONENT if decay is None else decay
    indicator = (np.abs(_values(E)) > 0).astype(float)
    closure = relevant_closure(c)
    if not len(closure):
        raise ValueError("size_indicator needs a nonempty collection")

    best_value, best_cube = -1.0, None
    by_scale: Dict[int, list] = {}
    for cube in closure.cubes:
        by_scale.setdefault(cube.scale, []).append(cube)
    for scale, cubes in sorted(by_scale.items()):
        table = _scale_averages(indicator, spec, scale, decay)
        for cube in cubes:
            value = table[cube.position]
            if value > best_value:
                best_value, best_cube = value, cube
    value = smoothed_average(indicator, best_cube, decay, spec)
    logger.debug(f"size over {len(closure)} closure cubes: {value:.4g} at {best_cube}.")
    return SizeReport(value=max(value, 0.0), cube=best_cube.cube_id, decay=decay)


def local_sf_average(
    coeffs: CoefficientMap,
    c: Collection,
    I0: DyadicCube,
    p: float,
    spec: GridSpec,
    q: Sequence[float] = (),
    tables: Optional[SquareSumTables] = None,
) -> float:
    """|I0|^{-1/p} || (sum_{I in I0} |a_I|^2/|I| 1_I)^{1/2} ||_{L^p}, with inner L^Q for vector data."""
    tables = tables or SquareSumTables(coeffs, c, spec)
    sf = np.sqrt(tables.local_block(I0))
    if q:
        sf = reduce_vector(sf, q)
    elif sf.ndim > spec.dimension:
        raise ValueError("vector coefficients need the inner exponents q")
    peak = float(sf.max()) if sf.size else 0.0
    if peak == 0.0:
        return 0.0
    return float(np.mean((sf / peak) ** p)) ** (1.0 / p) * peak


@dataclass(frozen=True)
class BmoResult:
    """Largest normalized local L^q mass of the localized square functions, per closure cube."""
    value: float
    cube: Optional[DyadicCube]
    table: Dict[DyadicCube, float]


def bmo_quantity(
    coeffs: CoefficientMap, c: Collection, q: float, spec: GridSpec, inner: Sequence[float] = ()
) -> BmoResult:
    """sup over C0 in the closure of |C0|^{-1/q} ||S_{C0}||_{L^q}, with the full table of candidates."""
    if not q > 0:
        raise ValueError(f"exponent must be positive, got {q}")
    tables = SquareSumTables(coeffs, c, spec)
    closure = relevant_closure(c)
    wanted: Dict[int, set] = {}
    for cube in closure.cubes:
        wanted.setdefault(cube.scale, set()).add(cube)

    table: Dict[DyadicCube, float] = {}
    for j, squared in tables.iter_suffixes():
        if j not in wanted:
            continue
        sf = np.sqrt(squared)
        if inner:
            sf = reduce_vector(sf, inner)
        averages = block_reduce(sf ** q, spec, j, np.mean) ** (1.0 / q)
        for cube in wanted[j]:
            table[cube] = float(averages[cube.position])
    for j, cubes in wanted.items():
        if j > max(tables.scales, default=0):
            for cube in cubes:
                table.setdefault(cube, 0.0)

    if not table:
        return BmoResult(0.0, None, {})
    cube = max(sorted(table), key=lambda k: table[k])
    return BmoResult(table[cube], cube, table)


# --- JSON records ---

def inputs_digest(inputs: Iterable[Any]) -> str:
    """sha256 over arrays (raw bytes) and everything else (canonical JSON)."""
    digest = hashlib.sha256()
    for item in inputs:
        if isinstance(item, GridFunction):
            digest.update(item.to_bytes())
        elif isinstance(item, np.ndarray):
            digest.update(repr((item.shape, str(item.dtype))).encode())
            digest.update(np.ascontiguousarray(item).tobytes())
        elif isinstance(item, Collection):
            digest.update(item.to_text().encode())
        elif hasattr(item, "model_dump"):
            digest.update(json.dumps(item.model_dump(mode="json"), sort_keys=True).encode())
        else:
            digest.update(json.dumps(item, sort_keys=True, default=str).encode())
    return digest.hexdigest()


def norm_record(op: str, inputs: Iterable[Any], value: float, cube: Optional[DyadicCube] = None) -> NormRecord:
    if not math.isfinite(value):
        raise ValueError(f"{op} produced a non-finite value")
    return NormRecord(op=op, inputs_digest=inputs_digest(inputs), value=value, cube=cube.cube_id if cube else None)
