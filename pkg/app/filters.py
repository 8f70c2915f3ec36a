"""Littlewood-Paley filter banks (frequency side) and lacunary families (spatial side)."""

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.fft as sfft
from scipy.special import eval_hermite

from .config import settings
from .exceptions import ConfigurationError, GridError, ResolutionError
from .grid import Collection, DyadicCube, GridFunction
from .models import GridSpec

logger = logging.getLogger(__name__)

PROFILES = ("smooth-bump", "sharp-annulus")
FAMILY_KINDS = ("haar", "smooth")

# Width of the Gaussian-derivative wavelet, in units of the cube side.
SMOOTH_SIGMA = 0.125
_PERIODIC_IMAGES = range(-3, 4)


# --- Spectral helpers ---

def spectrum(values: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    return sfft.fftn(values, axes=tuple(axes), workers=settings.FFT_WORKERS)


def inverse_spectrum(values: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    return sfft.ifftn(values, axes=tuple(axes), workers=settings.FFT_WORKERS)


def expand_multiplier(multiplier: np.ndarray, axes: Sequence[int], ndim: int) -> np.ndarray:
    """Reshape a multiplier living on `axes` so it broadcasts against an ndim array."""
    shape = [1] * ndim
    for axis, n in zip(axes, multiplier.shape):
        shape[axis] = n
    return multiplier.reshape(shape)


def frequency_lattice(spec: GridSpec, axes: Sequence[int]) -> Tuple[np.ndarray, ...]:
    """Integer frequencies xi_a in [-n/2, n/2) on the given axes, in FFT order."""
    freqs = [sfft.fftfreq(spec.shape[a], d=1.0 / spec.shape[a]) for a in axes]
    return tuple(np.meshgrid(*freqs, indexing="ij"))


def _meyer_nu(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x ** 4 * (35 - 84 * x + 70 * x ** 2 - 20 * x ** 3)


def _bump(t: np.ndarray, profile: str) -> np.ndarray:
    """Window in log2-frequency; its integer translates sum to one."""
    a = np.abs(t)
    if profile == "smooth-bump":
        values = np.cos(0.5 * np.pi * _meyer_nu(a)) ** 2
        return np.where(a >= 1.0, 0.0, values)
    return np.where((t >= -0.5) & (t < 0.5), 1.0, 0.0)


# --- Filter banks ---

@dataclass(frozen=True, eq=False)
class FilterBank:
    """psi-hat_k on the integer lattice of the factor axes, k_min <= k <= k_max."""
    spec: GridSpec
    axes: Tuple[int, ...]
    k_min: int
    k_max: int
    profile: str
    profiles: np.ndarray
    decay_log2_constant: float
    derivative_constants: Dict[int, float] = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return len(self.axes)

    @property
    def scales(self) -> range:
        return range(self.k_min, self.k_max + 1)

    @property
    def factor_shape(self) -> Tuple[int, ...]:
        return tuple(self.spec.shape[a] for a in self.axes)

    def psi_hat(self, k: int) -> np.ndarray:
        if k not in self.scales:
            raise ValueError(f"scale {k} outside the bank range [{self.k_min}, {self.k_max}]")
        return self.profiles[k - self.k_min]

    def partition_error(self) -> float:
        """max over nonzero lattice frequencies of |sum_k psi-hat_k - 1|."""
        total = self.profiles.sum(axis=0)
        nonzero = np.ones(self.factor_shape, dtype=bool)
        nonzero[(0,) * self.dimension] = False
        return float(np.max(np.abs(total[nonzero] - 1.0)))

    def to_csv_rows(self) -> Iterator[List]:
        lattice = frequency_lattice(self.spec, self.axes)
        yield [f"xi_{a}" for a in self.axes] + [f"psi_hat_{k}" for k in self.scales]
        for index in np.ndindex(*self.factor_shape):
            yield [int(x[index]) for x in lattice] + [repr(float(self.profiles[(j,) + index])) for j in range(len(self.scales))]


def top_scale(spec: GridSpec, axes: Sequence[int]) -> int:
    """Smallest k with 2^k >= the largest representable |xi|."""
    radius = math.sqrt(sum((spec.shape[a] // 2) ** 2 for a in axes))
    return int(math.ceil(math.log2(radius)))


def build_filterbank(
    spec: GridSpec,
    axes: Optional[Sequence[int]] = None,
    k_range: Optional[Tuple[int, int]] = None,
    profile: str = "smooth-bump",
    decay: Optional[float] = None,
) -> FilterBank:
    """Littlewood-Paley bank on the given factor axes; top and bottom scales absorb the tails."""
    axes = tuple(range(spec.dimension)) if axes is None else tuple(axes)
    if not axes or list(axes) != sorted(set(axes)) or axes[-1] >= spec.dimension:
        raise ConfigurationError(f"factor axes must be a sorted nonempty subset of the grid axes, got {axes}")
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile '{profile}', expected one of {PROFILES}")
    top = top_scale(spec, axes)
    k_min, k_max = (0, top) if k_range is None else k_range
    if k_min < 0 or k_max > top or k_min > k_max:
        raise ConfigurationError(f"scale range [{k_min}, {k_max}] does not fit the Nyquist band [0, {top}]")

    radius = np.sqrt(sum(x.astype(float) ** 2 for x in frequency_lattice(spec, axes)))
    origin = radius == 0
    with np.errstate(divide="ignore"):
        t = np.where(origin, -np.inf, np.log2(np.where(origin, 1.0, radius)))

    profiles = []
    for k in range(k_min, k_max + 1):
        values = _bump(t - k, profile)
        if k == k_min:
            values = np.where(t < k, 1.0, values)
        if k == k_max:
            values = np.where(t > k, 1.0, values)
        profiles.append(np.where(origin, 0.0, values))
    profiles = np.stack(profiles)

    decay = settings.DECAY_EXPONENT if decay is None else decay
    log2_constant = -np.inf
    for j, k in enumerate(range(k_min, k_max + 1)):
        live = profiles[j] > 0
        if live.any():
            terms = np.log2(profiles[j][live]) + decay * len(axes) * np.log2(1.0 + radius[live] / 2.0 ** k)
            log2_constant = max(log2_constant, float(terms.max()))

    derivatives: Dict[int, float] = {}
    if len(axes) == 1:
        for alpha in range(1, settings.SMOOTHNESS_ORDER + 1):
            worst = 0.0
            for j, k in enumerate(range(k_min, k_max + 1)):
                line = np.fft.fftshift(profiles[j])
                worst = max(worst, float(np.max(np.abs(np.diff(line, n=alpha)))) * 2.0 ** (k * alpha))
            derivatives[alpha] = worst

    bank = FilterBank(spec, axes, k_min, k_max, profile, profiles, log2_constant, derivatives)
    logger.info(
        f"Built {profile} filter bank on axes {axes}: scales [{k_min}, {k_max}], "
        f"partition error {bank.partition_error():.2e}, log2 decay constant {log2_constant:.1f}."
    )
    return bank


@dataclass(frozen=True)
class TensorFilterBank:
    """Tensor product of filter banks on disjoint factor axes covering the grid."""
    factors: Tuple[FilterBank, ...]

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not self.factors:
            raise ConfigurationError("a tensor bank needs at least one factor")
        spec = self.factors[0].spec
        if any(f.spec != spec for f in self.factors):
            raise ConfigurationError("tensor factors live on different grids")
        axes = [a for f in self.factors for a in f.axes]
        if sorted(axes) != list(range(spec.dimension)):
            raise ConfigurationError(f"factor axes {axes} must partition the {spec.dimension} grid axes")

    @property
    def spec(self) -> GridSpec:
        return self.factors[0].spec

    @property
    def axes(self) -> Tuple[int, ...]:
        return tuple(range(self.spec.dimension))

    def scale_tuples(self) -> Iterator[Tuple[int, ...]]:
        return itertools.product(*(f.scales for f in self.factors))

    def multiplier(self, ks: Sequence[int]) -> np.ndarray:
        if len(ks) != len(self.factors):
            raise ValueError(f"expected {len(self.factors)} scale indices, got {tuple(ks)}")
        d = self.spec.dimension
        out = np.ones((1,) * d)
        for bank, k in zip(self.factors, ks):
            out = out * expand_multiplier(bank.psi_hat(k), bank.axes, d)
        return np.broadcast_to(out, self.spec.shape)


def build_tensor_bank(
    spec: GridSpec,
    factor_dims: Optional[Sequence[int]] = None,
    profile: str = "smooth-bump",
    k_ranges: Optional[Sequence[Tuple[int, int]]] = None,
) -> TensorFilterBank:
    """Split the axes into consecutive factor blocks and build one bank per block."""
    factor_dims = list(factor_dims) if factor_dims else [1] * spec.dimension
    if sum(factor_dims) != spec.dimension:
        raise ConfigurationError(f"factor dimensions {factor_dims} do not sum to d={spec.dimension}")
    banks, start = [], 0
    for j, m in enumerate(factor_dims):
        k_range = k_ranges[j] if k_ranges else None
        banks.append(build_filterbank(spec, tuple(range(start, start + m)), k_range, profile))
        start += m
    return TensorFilterBank(tuple(banks))


def reproducing_profile(bank: FilterBank, k: int) -> np.ndarray:
    """psi-hat_{k-1} + psi-hat_k + psi-hat_{k+1}: equal to 1 on supp psi-hat_k."""
    return sum(bank.psi_hat(j) for j in (k - 1, k, k + 1) if j in bank.scales)


def export_profiles_csv(bank: FilterBank, path: str):
    with open(path, "w", newline="") as handle:
        csv.writer(handle).writerows(bank.to_csv_rows())
    logger.info(f"Exported {len(bank.scales)} profiles to {path}.")


# --- Convolutions ---

Bank = Union[FilterBank, TensorFilterBank]


def _check_grid(f: GridFunction, bank: Bank):
    if f.spec != bank.spec:
        raise GridError(f"function grid {f.spec.levels} does not match bank grid {bank.spec.levels}")


def _multiplier(bank: Bank, k) -> np.ndarray:
    if isinstance(bank, TensorFilterBank):
        ks = (k,) if isinstance(k, int) else tuple(k)
        return bank.multiplier(ks)
    if not isinstance(k, (int, np.integer)):
        raise ValueError(f"a single-factor bank takes one scale index, got {k!r}")
    return bank.psi_hat(int(k))


def band_convolve(f: GridFunction, bank: Bank, k) -> GridFunction:
    """f * psi_k (or f * Psi_k for a tensor bank), exact by discrete Fourier multiplication."""
    _check_grid(f, bank)
    axes = bank.axes
    ndim = f.values.ndim
    out = inverse_spectrum(spectrum(f.values, axes) * expand_multiplier(_multiplier(bank, k), axes, ndim), axes)
    return GridFunction(f.spec, out, f.vector_shape)


def iter_bands(f: GridFunction, bank: Bank) -> Iterator[Tuple[object, np.ndarray]]:
    """(k, f * psi_k) for every scale (tuple) of the bank, from a single forward FFT."""
    _check_grid(f, bank)
    axes = bank.axes
    ndim = f.values.ndim
    f_hat = spectrum(f.values, axes)
    scales = bank.scale_tuples() if isinstance(bank, TensorFilterBank) else bank.scales
    for k in scales:
        yield k, inverse_spectrum(f_hat * expand_multiplier(_multiplier(bank, k), axes, ndim), axes)


def remove_factor_means(f: GridFunction, axis_groups: Sequence[Sequence[int]]) -> GridFunction:
    """Zero every Fourier coefficient whose frequency vanishes on some factor group."""
    axes = tuple(range(f.spec.dimension))
    f_hat = spectrum(f.values, axes)
    keep = np.ones(f.spec.shape, dtype=bool)
    for group in axis_groups:
        lattice = frequency_lattice(f.spec, group)
        at_zero = np.all([x == 0 for x in lattice], axis=0)
        keep &= ~expand_multiplier(at_zero, group, f.spec.dimension)
    f_hat = f_hat * expand_multiplier(keep, axes, f.values.ndim)
    out = inverse_spectrum(f_hat, axes)
    if not f.is_complex:
        out = out.real
    return f.with_values(out)


# --- Lacunary families ---

@dataclass(frozen=True, eq=False)
class LacunaryFamily:
    """L^p-normalized mean-zero bumps phi_I; phi_I is a torus translate of the scale profile."""
    spec: GridSpec
    collection: Collection
    p: float
    kind: str
    profiles: Dict[int, np.ndarray]
    decay: float
    smoothness: int
    decay_log_constant: float
    derivative_constants: Dict[int, float] = field(default_factory=dict)
    family_id: str = ""

    @property
    def decay_constant(self) -> float:
        return float(np.exp(min(self.decay_log_constant, 700.0)))

    def shift(self, cube: DyadicCube) -> Tuple[int, ...]:
        return tuple(x * m for x, m in zip(cube.position, cube.cells_per_axis(self.spec)))

    def function(self, cube: DyadicCube) -> np.ndarray:
        if cube not in self.collection:
            raise KeyError(f"cube {cube.cube_id} is not indexed by family {self.family_id}")
        return np.roll(self.profiles[cube.scale], self.shift(cube), axis=tuple(range(self.spec.dimension)))

    def items(self) -> Iterator[Tuple[DyadicCube, np.ndarray]]:
        for cube in self.collection:
            yield cube, self.function(cube)

    def mean_errors(self) -> Dict[int, float]:
        """Per scale: |sum phi cell| / ||phi||_1 (translation preserves both)."""
        out = {}
        for k, phi in self.profiles.items():
            l1 = float(np.sum(np.abs(phi)))
            out[k] = abs(float(np.sum(phi))) / l1 if l1 > 0 else 0.0
        return out

    def to_binaries(self) -> Dict[str, bytes]:
        return {cube.cube_id: GridFunction(self.spec, phi).to_bytes() for cube, phi in self.items()}


def _normalizer(cube: DyadicCube, p: float) -> float:
    return 1.0 if math.isinf(p) else cube.measure ** (-1.0 / p)


def _lp_norm(values: np.ndarray, spec: GridSpec, p: float) -> float:
    if math.isinf(p):
        return float(np.max(np.abs(values)))
    return float(np.sum(np.abs(values) ** p) * spec.cell_measure) ** (1.0 / p)


def _axis_offsets(spec: GridSpec, cube: DyadicCube) -> List[np.ndarray]:
    """Signed displacement from the cube centre in cube-side units, wrapped to a half period."""
    out = []
    for n, m in zip(spec.shape, cube.cells_per_axis(spec)):
        i = np.arange(n)
        wrapped = (i - m // 2 + n // 2) % n - n // 2
        out.append(wrapped / m)
    return out


def _gaussian_derivative(u: np.ndarray, period: float, alpha: int = 0) -> np.ndarray:
    """alpha-th derivative of the periodized odd profile u exp(-u^2 / 2 sigma^2)."""
    scale = SMOOTH_SIGMA * math.sqrt(2.0)
    total = np.zeros_like(u)
    for r in _PERIODIC_IMAGES:
        v = u + r * period
        g = np.exp(-(v / scale) ** 2)

        def g_derivative(order: int) -> np.ndarray:
            if order < 0:
                return np.zeros_like(v)
            return (-1.0) ** order * scale ** (-order) * eval_hermite(order, v / scale) * g

        total += v * g_derivative(alpha) + alpha * g_derivative(alpha - 1)
    return total


def _outer(vectors: Sequence[np.ndarray]) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def _haar_profile(spec: GridSpec, cube: DyadicCube, p: float) -> np.ndarray:
    axes = []
    for n, m in zip(spec.shape, cube.cells_per_axis(spec)):
        line = np.zeros(n)
        line[: m // 2] = 1.0
        line[m // 2: m] = -1.0
        axes.append(line)
    return _normalizer(cube, p) * _outer(axes)


def _smooth_profile(spec: GridSpec, cube: DyadicCube, p: float) -> Tuple[np.ndarray, float]:
    axes = []
    for u, m, n in zip(_axis_offsets(spec, cube), cube.cells_per_axis(spec), spec.shape):
        axes.append(_gaussian_derivative(u, n / m))
    raw = _outer(axes)
    amplitude = 1.0 / _lp_norm(raw, spec, p)
    return amplitude * raw, amplitude


def log_decay_constant(phi: np.ndarray, spec: GridSpec, cube: DyadicCube, p: float, decay: float) -> float:
    """log of max |phi| |I|^{1/p} (1 + dist/side)^decay over the grid."""
    magnitude = np.abs(phi)
    live = magnitude > 0
    if not live.any():
        return -np.inf
    dist = cube.distance(spec)[live] / cube.side
    terms = np.log(magnitude[live]) - math.log(_normalizer(cube, p)) + decay * np.log1p(dist)
    return float(terms.max())


def _derivative_constants(spec: GridSpec, cube: DyadicCube, p: float, amplitude: float, decay: float, order: int) -> Dict[int, float]:
    """C_alpha with |d^alpha phi_I| <= C_alpha |I|^{-1/p} side^{-alpha} (1+dist/side)^{-decay}; 1-D only."""
    (u,) = _axis_offsets(spec, cube)
    period = spec.shape[0] / cube.cells_per_axis(spec)[0]
    dist = np.log1p(cube.distance(spec) / cube.side)
    out = {}
    for alpha in range(order + 1):
        magnitude = np.abs(amplitude * _gaussian_derivative(u, period, alpha))
        live = magnitude > 0
        terms = np.log(magnitude[live]) - math.log(_normalizer(cube, p)) + decay * dist[live]
        out[alpha] = float(np.exp(min(terms.max(), 700.0))) if live.any() else 0.0
    return out


def build_lacunary_family(
    spec: GridSpec,
    c: Collection,
    p: float,
    kind: str = "haar",
    decay: Optional[float] = None,
    smoothness: Optional[int] = None,
) -> LacunaryFamily:
    """Haar or smooth-wavelet family over c, L^p-normalized and mean zero along every axis."""
    if kind not in FAMILY_KINDS:
        raise ConfigurationError(f"unknown family kind '{kind}', expected one of {FAMILY_KINDS}")
    if not (p > 0):
        raise ValueError(f"normalization exponent must be positive, got {p}")
    decay = settings.DECAY_EXPONENT if decay is None else decay
    smoothness = settings.SMOOTHNESS_ORDER if smoothness is None else smoothness
    minimum = settings.MIN_HAAR_CELLS if kind == "haar" else settings.MIN_SMOOTH_CELLS

    too_small = []
    for cube in c:
        if cube.dimension != spec.dimension or cube.scale > spec.max_scale or min(cube.cells_per_axis(spec)) < minimum:
            too_small.append(cube.cube_id)
    if too_small:
        raise ResolutionError(too_small, minimum)

    profiles: Dict[int, np.ndarray] = {}
    log_constant = -np.inf
    derivatives: Dict[int, float] = {}
    for k in sorted({cube.scale for cube in c.cubes}):
        base = DyadicCube(k, (0,) * spec.dimension)
        if kind == "haar":
            phi = _haar_profile(spec, base, p)
        else:
            phi, amplitude = _smooth_profile(spec, base, p)
            if spec.dimension == 1:
                for alpha, value in _derivative_constants(spec, base, p, amplitude, decay, smoothness).items():
                    derivatives[alpha] = max(derivatives.get(alpha, 0.0), value)
        phi.setflags(write=False)
        profiles[k] = phi
        log_constant = max(log_constant, log_decay_constant(phi, spec, base, p, decay))

    family = LacunaryFamily(
        spec=spec,
        collection=c,
        p=p,
        kind=kind,
        profiles=profiles,
        decay=decay,
        smoothness=smoothness if kind == "smooth" and spec.dimension == 1 else 0,
        decay_log_constant=log_constant,
        derivative_constants=derivatives,
        family_id=f"{kind}-p{p:g}-n{len(c)}",
    )
    worst_mean = max(family.mean_errors().values(), default=0.0)
    logger.info(
        f"Built {kind} family over {len(c)} cubes (p={p:g}): mean error {worst_mean:.1e}, "
        f"log decay constant {log_constant:.2f}."
    )
    return family


# --- Spatial splitting ---

@dataclass(frozen=True, eq=False)
class SpatialSplit:
    """phi_I = sum_l 2^{-M l} phi_{I,l} with supp phi_{I,l} in 2^l I, truncated at l_max."""
    families: List[LacunaryFamily]
    decay_budget: float
    ell_max: int
    residual: float
    tail_bound: float
    tolerance_met: bool

    def reconstruct(self, cube: DyadicCube) -> np.ndarray:
        return sum(2.0 ** (-self.decay_budget * ell) * fam.function(cube) for ell, fam in enumerate(self.families))


def _symmetric_window(spec: GridSpec, cube: DyadicCube, ell: int) -> np.ndarray:
    """Cells of 2^ell I symmetric about the centre sample; odd profiles keep mean zero on it."""
    lines = []
    for u, m, n in zip(_axis_offsets(spec, cube), cube.cells_per_axis(spec), spec.shape):
        half = (m << ell) // 2
        if 2 * half >= n:
            lines.append(np.ones(n, dtype=bool))
        else:
            lines.append(np.abs(np.rint(u * m)) <= half - 1)
    return _outer(lines).astype(bool)


def spatial_split(fam: LacunaryFamily, M: float, ell_max: int) -> SpatialSplit:
    """Split each phi_I into rings of dilates of I, rescaled by 2^{M l}."""
    if ell_max < 0:
        raise ValueError(f"ell_max must be nonnegative, got {ell_max}")
    if fam.kind == "haar":
        return SpatialSplit([fam], M, 0, 0.0, 0.0, True)

    spec = fam.spec
    pieces: List[Dict[int, np.ndarray]] = [dict() for _ in range(ell_max + 1)]
    residual, constant = 0.0, 0.0
    for k, phi in fam.profiles.items():
        base = DyadicCube(k, (0,) * spec.dimension)
        normal = _normalizer(base, fam.p)
        previous = np.zeros(spec.shape, dtype=bool)
        for ell in range(ell_max + 1):
            window = _symmetric_window(spec, base, ell)
            piece = 2.0 ** (M * ell) * np.where(window & ~previous, phi, 0.0)
            piece.setflags(write=False)
            pieces[ell][k] = piece
            constant = max(constant, float(np.max(np.abs(piece))) / normal)
            previous = window
        residual = max(residual, float(np.max(np.abs(np.where(previous, 0.0, phi)))) / normal)

    families = [
        LacunaryFamily(
            spec=spec,
            collection=fam.collection,
            p=fam.p,
            kind="split",
            profiles=profiles,
            decay=fam.decay,
            smoothness=0,
            decay_log_constant=max(
                log_decay_constant(phi, spec, DyadicCube(k, (0,) * spec.dimension), fam.p, fam.decay)
                for k, phi in profiles.items()
            ) if profiles else -np.inf,
            family_id=f"{fam.family_id}-ring{ell}",
        )
        for ell, profiles in enumerate(pieces)
    ]
    tail_bound = 2.0 ** (-M * ell_max) * constant
    met = residual <= tail_bound
    if not met:
        logger.warning(
            f"spatial_split truncation at l_max={ell_max} leaves residual {residual:.3e} above the tail bound {tail_bound:.3e}."
        )
    return SpatialSplit(families, M, ell_max, residual, tail_bound, met)
