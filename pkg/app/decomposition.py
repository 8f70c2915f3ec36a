"""Coefficient analysis, the model operator and the iterative sampled reconstruction."""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import settings
from .exceptions import ContractionError, GridError
from .filters import (
    FilterBank,
    LacunaryFamily,
    expand_multiplier,
    inverse_spectrum,
    log_decay_constant,
    reproducing_profile,
    spectrum,
)
from .grid import DyadicCube, GridFunction, block_view, expand_blocks
from .models import MixedNormSpec
from .norms import mixed_norm
from .square_functions import square_function

logger = logging.getLogger(__name__)

TIE_TOLERANCE = 1e-12
# Residuals below this fraction of the band are rounding noise and carry no contraction information.
NOISE_FLOOR = 1e-13
# Rounding allowance on the reconstruction error, relative to the band sup.
RELATIVE_FLOOR = 1e-10


class Coefficients(dict):
    """cube -> coefficient (scalar or one entry per vector index), tagged with the source family."""

    def __init__(self, *args, family_id: str = "", vector_shape: Tuple[int, ...] = (), **kwargs):
        super().__init__(*args, **kwargs)
        self.family_id = family_id
        self.vector_shape = tuple(vector_shape)

    def scaled(self, factor: complex) -> "Coefficients":
        return Coefficients(
            {cube: value * factor for cube, value in self.items()},
            family_id=self.family_id,
            vector_shape=self.vector_shape,
        )


# --- Analysis and synthesis ---

def _spatial_axes(spec) -> Tuple[int, ...]:
    return tuple(range(spec.dimension))


def _corners(values: np.ndarray, cells: Sequence[int]) -> np.ndarray:
    return values[tuple(slice(None, None, m) for m in cells)]


def _unwrap(value: np.ndarray, is_complex: bool):
    if value.shape == ():
        return complex(value) if is_complex else float(value.real)
    return value.copy() if is_complex else value.real.copy()


def analyze(f: GridFunction, fam: LacunaryFamily) -> Coefficients:
    """<f, phi_I> per cube and vector index, by one FFT correlation per scale."""
    if f.spec != fam.spec:
        raise GridError(f"function grid {f.spec.levels} does not match family grid {fam.spec.levels}")
    axes = _spatial_axes(f.spec)
    ndim = f.values.ndim
    f_hat = spectrum(f.values, axes)
    is_complex = f.is_complex
    out = Coefficients(family_id=fam.family_id, vector_shape=f.vector_shape)
    by_scale: Dict[int, List[DyadicCube]] = {}
    for cube in fam.collection.cubes:
        by_scale.setdefault(cube.scale, []).append(cube)
    for k, cubes in by_scale.items():
        phi_hat = expand_multiplier(np.conj(spectrum(fam.profiles[k], axes)), axes, ndim)
        correlation = inverse_spectrum(f_hat * phi_hat, axes) * f.spec.cell_measure
        corners = _corners(correlation, DyadicCube(k, (0,) * f.spec.dimension).cells_per_axis(f.spec))
        for cube in cubes:
            out[cube] = _unwrap(corners[cube.position], is_complex)
    logger.debug(f"Analyzed f against {len(out)} cubes of family {fam.family_id}.")
    return out


def synthesize(coeffs: Mapping[DyadicCube, object], fam2: LacunaryFamily) -> GridFunction:
    """sum_I a_I phi_I, one FFT convolution per scale."""
    missing = [cube.cube_id for cube in coeffs if cube not in fam2.collection]
    if missing:
        raise ValueError(f"{len(missing)} coefficient cube(s) missing from family {fam2.family_id}, e.g. {missing[0]}")
    spec = fam2.spec
    vector_shape = tuple(getattr(coeffs, "vector_shape", ())) or next(
        (np.shape(v) for v in coeffs.values()), ()
    )
    axes = _spatial_axes(spec)
    ndim = spec.dimension + len(vector_shape)
    is_complex = any(np.iscomplexobj(v) for v in coeffs.values())
    total = np.zeros(spec.shape + vector_shape, dtype=complex)
    by_scale: Dict[int, List[DyadicCube]] = {}
    for cube in coeffs:
        by_scale.setdefault(cube.scale, []).append(cube)
    for k, cubes in by_scale.items():
        cells = DyadicCube(k, (0,) * spec.dimension).cells_per_axis(spec)
        spikes = np.zeros(spec.shape + vector_shape, dtype=complex)
        for cube in cubes:
            corner = tuple(x * m for x, m in zip(cube.position, cells))
            spikes[corner] = coeffs[cube]
        phi_hat = expand_multiplier(spectrum(fam2.profiles[k], axes), axes, ndim)
        total += inverse_spectrum(spectrum(spikes, axes) * phi_hat, axes)
    return GridFunction(spec, total if is_complex else total.real, vector_shape)


# --- Sample points ---

def _check_one_dimensional(f: GridFunction, bank: FilterBank):
    if f.spec.dimension != 1 or bank.axes != (0,):
        raise ValueError("sample-point selection works on a one-dimensional factor")
    if f.spec != bank.spec:
        raise GridError(f"function grid {f.spec.levels} does not match bank grid {bank.spec.levels}")


def band_scales(bank: FilterBank, N: int) -> List[int]:
    """Bands j whose cubes (scale j + N) are resolved by the grid."""
    return [j for j in bank.scales if j + N <= bank.spec.max_scale]


def choose_sample_points(f: GridFunction, bank: FilterBank, N: int) -> Dict[DyadicCube, np.ndarray]:
    """For every I of side 2^{-k}, the grid index in I minimizing |f * psi_{k-N}|; ties go left."""
    _check_one_dimensional(f, bank)
    if N < 0:
        raise ValueError(f"shift N must be nonnegative, got {N}")
    spec = f.spec
    ndim = f.values.ndim
    f_hat = spectrum(f.values, (0,))
    points: Dict[DyadicCube, np.ndarray] = {}
    for j in band_scales(bank, N):
        k = j + N
        band = np.abs(inverse_spectrum(f_hat * expand_multiplier(bank.psi_hat(j), (0,), ndim), (0,)))
        blocks = block_view(band, spec, k)
        floor = blocks.min(axis=1, keepdims=True)
        reference = max(float(band.max()), np.finfo(float).tiny)
        ties = blocks <= floor + TIE_TOLERANCE * reference
        offsets = np.argmax(ties, axis=1)
        m = blocks.shape[1]
        for x in range(1 << k):
            points[DyadicCube(k, (x,))] = x * m + offsets[x]
    return points


def _sample_table(points: Mapping[DyadicCube, np.ndarray], k: int) -> np.ndarray:
    return np.stack([np.asarray(points[DyadicCube(k, (x,))]) for x in range(1 << k)])


# --- Iterative reconstruction ---

@dataclass
class BandReconstruction:
    """One band g = f * psi_j rebuilt from its samples at the cubes of scale j + N."""
    band: int
    residuals: List[float]
    ratio: float
    error: float
    reference: float


@dataclass
class FJResult:
    """Residual table and the per-cube functions psi_I with g = sum_I g(x_I) psi_I up to Rest_{l_max}."""
    shift: int
    l_max: int
    bands: Dict[int, BandReconstruction]
    ratio: float
    tolerance: float
    error: float
    x_pts: Dict[DyadicCube, np.ndarray]
    _bank: Optional[FilterBank] = field(default=None, repr=False)
    _psi: Dict[DyadicCube, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def residuals(self) -> List[float]:
        """sup over bands of ||Rest_l||_inf, for l = 1..l_max."""
        out = [0.0] * self.l_max
        for record in self.bands.values():
            out = [max(a, b) for a, b in zip(out, record.residuals)]
        return out

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance

    def psi(self, cube: DyadicCube) -> np.ndarray:
        """psi_I = sum_{l < l_max} T^l(psi-tilde * 1_I), computed on first use."""
        if cube not in self._psi:
            j = cube.scale - self.shift
            if j not in self.bands:
                raise KeyError(f"cube {cube.cube_id} is not at a reconstructed scale")
            operator = _SamplingOperator(self._bank, j, self.shift, self.x_pts)
            term = operator.smooth(cube.indicator(self._bank.spec).astype(complex))
            total = np.zeros_like(term)
            for _ in range(self.l_max):
                total += term
                term = operator.apply(term)
            self._psi[cube] = total
        return self._psi[cube]

    def psi_log_constant(self, cube: DyadicCube, decay: Optional[float] = None) -> float:
        """log of max |psi_I| (1 + dist/side)^decay."""
        decay = settings.DECAY_EXPONENT if decay is None else decay
        return log_decay_constant(self.psi(cube), self._bank.spec, cube, math.inf, decay)

    def to_json(self) -> str:
        return json.dumps(
            {
                "N": self.shift,
                "l_max": self.l_max,
                "ratio": self.ratio,
                "tolerance": self.tolerance,
                "error": self.error,
                "residuals": self.residuals,
                "bands": {str(j): {"residuals": b.residuals, "ratio": b.ratio, "error": b.error} for j, b in self.bands.items()},
            },
            sort_keys=True,
        )

    def to_binaries(self, cubes: Sequence[DyadicCube]) -> Dict[str, bytes]:
        return {cube.cube_id: GridFunction(self._bank.spec, self.psi(cube)).to_bytes() for cube in cubes}


class _SamplingOperator:
    """T(h) = psi-tilde * (h - P h), P the piecewise-constant sampling at the x_I."""

    def __init__(self, bank: FilterBank, j: int, N: int, x_pts: Mapping[DyadicCube, np.ndarray]):
        self.spec = bank.spec
        self.scale = j + N
        self.plateau = reproducing_profile(bank, j)
        self.index = _sample_table(x_pts, self.scale)

    def smooth(self, h: np.ndarray) -> np.ndarray:
        return inverse_spectrum(spectrum(h, (0,)) * self.plateau, (0,))

    def sample(self, h: np.ndarray) -> np.ndarray:
        return expand_blocks(h[self.index], self.spec, self.scale)

    def apply(self, h: np.ndarray) -> np.ndarray:
        return self.smooth(h - self.sample(h))


def fj_reconstruct(
    f: GridFunction,
    bank: FilterBank,
    N: int,
    x_pts: Optional[Mapping[DyadicCube, np.ndarray]] = None,
    l_max: Optional[int] = None,
) -> FJResult:
    """Rebuild every resolved band of f from its samples: g = sum_l T^{l-1}(psi-tilde * P g) + Rest_{l_max}."""
    _check_one_dimensional(f, bank)
    if not f.is_scalar:
        raise ValueError("fj_reconstruct works on scalar functions")
    l_max = settings.FJ_MAX_ITERATIONS if l_max is None else l_max
    if l_max < 1:
        raise ValueError(f"l_max must be at least 1, got {l_max}")
    scales = band_scales(bank, N)
    if not scales:
        raise ValueError(f"N={N} leaves no band resolvable on a grid of level {f.spec.max_scale}")
    x_pts = choose_sample_points(f, bank, N) if x_pts is None else x_pts

    f_hat = spectrum(f.values, (0,))
    bands: Dict[int, BandReconstruction] = {}
    for j in scales:
        operator = _SamplingOperator(bank, j, N, x_pts)
        g = inverse_spectrum(f_hat * bank.psi_hat(j), (0,))
        term = operator.smooth(operator.sample(g))
        rebuilt = np.zeros_like(g)
        residuals = []
        rest = g
        for _ in range(l_max):
            rebuilt += term
            term = operator.apply(term)
            rest = operator.apply(rest)
            residuals.append(float(np.max(np.abs(rest))))
        reference = float(np.max(np.abs(g)))
        floor = max(NOISE_FLOOR * reference, np.finfo(float).tiny * 1e3)
        chain = [reference] + residuals
        ratios = [b / a for a, b in zip(chain, chain[1:]) if a > floor]
        ratio = max(ratios, default=0.0)
        bands[j] = BandReconstruction(
            band=j,
            residuals=residuals,
            ratio=ratio,
            error=float(np.max(np.abs(g - rebuilt))),
            reference=reference,
        )

    ratio = max(b.ratio for b in bands.values())
    if ratio >= 1.0:
        logger.error(f"Sampled reconstruction does not contract at N={N}: ratio {ratio:.4g}.")
        raise ContractionError(N, ratio)
    tolerance = max((ratio ** l_max + RELATIVE_FLOOR) * b.reference for b in bands.values())
    error = max(b.error for b in bands.values())
    result = FJResult(N, l_max, bands, ratio, tolerance, error, dict(x_pts), bank)
    logger.info(
        f"Reconstructed {len(bands)} band(s) at N={N}, l_max={l_max}: ratio {ratio:.3g}, "
        f"error {error:.3e} against tolerance {tolerance:.3e}."
    )
    return result


def search_shift(f: GridFunction, bank: FilterBank, target: float = 0.5, probe_iterations: int = 4) -> Tuple[int, float]:
    """Smallest N whose measured contraction ratio is <= target: doubling, then bisection."""
    _check_one_dimensional(f, bank)
    ceiling = bank.spec.max_scale - bank.k_min

    def measure(N: int) -> float:
        try:
            return fj_reconstruct(f, bank, N, l_max=probe_iterations).ratio
        except ContractionError as e:
            return e.ratio

    low, high, ratio = 0, 1, measure(1)
    while ratio > target:
        if high >= ceiling:
            raise ContractionError(high, ratio)
        low, high = high, min(2 * high, ceiling)
        ratio = measure(high)
    while high - low > 1:
        middle = (low + high) // 2
        middle_ratio = measure(middle)
        if middle_ratio <= target:
            high, ratio = middle, middle_ratio
        else:
            low = middle
    logger.info(f"Shift search settled on N={high} with contraction ratio {ratio:.3g}.")
    return high, ratio


# --- Discrete majorization chain ---

@dataclass(frozen=True)
class PipelineReport:
    """||f||, the sampled square sum, the shifted square sum and ||Sf||, plus the pointwise check."""
    shift: int
    norm_f: float
    sampled_norm: float
    shifted_norm: float
    square_norm: float
    pointwise_ok: bool
    pointwise_excess: float


def fj_pipeline_check(f: GridFunction, bank: FilterBank, N: int, p: float = 2.0, q: Sequence[float] = ()) -> PipelineReport:
    """Evaluate the chain ||f|| , ||(sum |g_k(x_I)|^2 1_I)^{1/2}|| , ||(sum |g_k|^2)^{1/2}||."""
    _check_one_dimensional(f, bank)
    spec = f.spec
    norm_spec = MixedNormSpec(p=(p,), q=tuple(q))
    x_pts = choose_sample_points(f, bank, N)
    f_hat = spectrum(f.values, (0,))
    ndim = f.values.ndim

    sampled = np.zeros(f.values.shape)
    shifted = np.zeros(f.values.shape)
    for j in band_scales(bank, N):
        k = j + N
        band = np.abs(inverse_spectrum(f_hat * expand_multiplier(bank.psi_hat(j), (0,), ndim), (0,)))
        index = _sample_table(x_pts, k)
        picked = np.take_along_axis(band, index, axis=0)
        sampled += expand_blocks(picked, spec, k) ** 2
        shifted += band ** 2
    sampled, shifted = np.sqrt(sampled), np.sqrt(shifted)
    excess = float(np.max(sampled - shifted, initial=0.0))
    reference = max(float(shifted.max(initial=0.0)), 1.0)

    def norm(values: np.ndarray) -> float:
        return mixed_norm(GridFunction(spec, values, f.vector_shape), norm_spec)

    report = PipelineReport(
        shift=N,
        norm_f=norm(f.values),
        sampled_norm=norm(sampled),
        shifted_norm=norm(shifted),
        square_norm=norm(square_function(f, bank).values),
        pointwise_ok=excess <= 10 * TIE_TOLERANCE * reference,
        pointwise_excess=max(excess, 0.0),
    )
    logger.info(
        f"Majorization chain at N={N}: ||f||={report.norm_f:.4g}, sampled={report.sampled_norm:.4g}, "
        f"shifted={report.shifted_norm:.4g}, ||Sf||={report.square_norm:.4g}."
    )
    return report
