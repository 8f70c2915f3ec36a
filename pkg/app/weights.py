"""Muckenhoupt weight machinery on the grid: constructors, characteristics and maximal operators."""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage as ndimage
from scipy.special import logsumexp

from .config import settings
from .exceptions import GridError
from .grid import GridFunction, torus_distance
from .models import AInfinityReport, ApReport, GridSpec, ReverseHolderReport

logger = logging.getLogger(__name__)

# Samples below exp(LOG_FLOOR) are stored clamped; the log samples stay exact.
LOG_FLOOR = math.log(np.finfo(float).tiny)
LOG_CEILING = 700.0
A_INFINITY_FLOOR = 1.05
REVERSE_HOLDER_FLOOR = 1.0 / 16
REVERSE_HOLDER_CEILING = 8.0
REVERSE_HOLDER_DEGENERATE = 0.25
SPIKES_PER_AXIS = 4

Generator = Callable[[GridSpec], np.ndarray]


@dataclass(frozen=True, eq=False)
class Weight:
    """Positive samples, their exact logarithms and how they were made."""
    spec: GridSpec
    log_samples: np.ndarray
    kind: str
    parameters: Dict[str, Any] = field(default_factory=dict)
    generator: Optional[Generator] = field(default=None, repr=False)

    def __post_init__(self):
        logs = np.array(self.log_samples, dtype=float)
        if logs.shape != self.spec.shape:
            raise GridError(f"weight samples of shape {logs.shape} do not match grid {self.spec.shape}")
        if np.any(np.isnan(logs)) or np.any(np.isposinf(logs)) or np.any(np.isneginf(logs)):
            raise ValueError("weight samples must be strictly positive and finite")
        logs.setflags(write=False)
        object.__setattr__(self, "log_samples", logs)

    @property
    def samples(self) -> np.ndarray:
        return np.exp(np.clip(self.log_samples, LOG_FLOOR, LOG_CEILING))

    @property
    def clamped(self) -> bool:
        return bool(np.any(self.log_samples < LOG_FLOOR) or np.any(self.log_samples > LOG_CEILING))

    def as_function(self) -> GridFunction:
        return GridFunction(self.spec, self.samples)

    def mass(self, mask: Optional[np.ndarray] = None) -> float:
        """w(E) for a union of grid cells (the whole torus when no mask is given)."""
        values = self.samples if mask is None else np.where(mask, self.samples, 0.0)
        return float(np.sum(values)) * self.spec.cell_measure

    def at_resolution(self, spec: GridSpec) -> "Weight":
        """The same weight sampled on another grid: regenerated when possible, else subsampled."""
        if spec == self.spec:
            return self
        if self.generator is not None:
            return Weight(spec, self.generator(spec), self.kind, self.parameters, self.generator)
        steps = [a - b for a, b in zip(self.spec.levels, spec.levels)]
        if len(steps) != self.spec.dimension or any(s < 0 for s in steps):
            raise GridError(f"custom weight on {self.spec.levels} cannot be moved to {spec.levels}")
        view = self.log_samples[tuple(slice(None, None, 1 << s) for s in steps)]
        return Weight(spec, view, self.kind, self.parameters)


# --- Constructors ---

def singularity(spec: GridSpec) -> Tuple[float, ...]:
    """Torus midpoint pushed half a cell off the lattice on every axis."""
    return tuple(0.5 + 0.5 / n for n in spec.shape)


def _power_logs(exponent: float) -> Generator:
    def generate(spec: GridSpec) -> np.ndarray:
        return exponent * np.log(torus_distance(spec, singularity(spec)))
    return generate


def _spike_logs(sharpness: float) -> Generator:
    def generate(spec: GridSpec) -> np.ndarray:
        per_axis = [[(j + 0.5) / SPIKES_PER_AXIS + 0.5 / n for j in range(SPIKES_PER_AXIS)] for n in spec.shape]
        nearest = None
        for centre in itertools.product(*per_axis):
            dist = torus_distance(spec, centre)
            nearest = dist if nearest is None else np.minimum(nearest, dist)
        return -sharpness / nearest
    return generate


def _product_logs(factors: Sequence[Weight]) -> Generator:
    dims = [f.spec.dimension for f in factors]

    def generate(spec: GridSpec) -> np.ndarray:
        out, start = np.zeros(()), 0
        for factor, m in zip(factors, dims):
            sub = GridSpec(levels=spec.levels[start:start + m])
            logs = factor.at_resolution(sub).log_samples
            out = np.add.outer(out, logs)
            start += m
        return out
    return generate


def make_weight(
    kind: str,
    spec: Optional[GridSpec] = None,
    exponent: float = 0.0,
    factors: Optional[Sequence[Weight]] = None,
    samples: Optional[np.ndarray] = None,
    sharpness: float = 1.0,
) -> Weight:
    """Power |x - c|^a, product u(x)v(y), custom samples, or exponential spikes exp(-s/dist(x, Z))."""
    if kind == "product":
        if not factors:
            raise ValueError("a product weight needs at least one factor")
        levels = tuple(level for f in factors for level in f.spec.levels)
        groups = tuple(f.spec.dimension for f in factors)
        product_spec = GridSpec(levels=levels, groups=groups)
        generate = _product_logs(factors)
        has_generators = all(f.generator is not None for f in factors)
        parameters = {"factors": [{"kind": f.kind, **f.parameters} for f in factors]}
        return Weight(product_spec, generate(product_spec), kind, parameters, generate if has_generators else None)

    if spec is None:
        raise ValueError(f"a {kind} weight needs a grid")
    if kind == "power":
        if exponent <= -spec.dimension:
            raise ValueError(f"|x|^{exponent} is not locally integrable in dimension {spec.dimension}")
        generate = _power_logs(exponent)
        return Weight(spec, generate(spec), kind, {"exponent": exponent}, generate)
    if kind == "spikes":
        if sharpness <= 0:
            raise ValueError(f"spike sharpness must be positive, got {sharpness}")
        generate = _spike_logs(sharpness)
        weight = Weight(spec, generate(spec), kind, {"sharpness": sharpness}, generate)
        if weight.clamped:
            logger.warning(f"Spike weight with sharpness {sharpness} underflows; samples are clamped, logs kept exact.")
        return weight
    if kind == "custom":
        if samples is None:
            raise ValueError("a custom weight needs samples")
        values = np.asarray(samples, dtype=float).reshape(spec.shape)
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ValueError("custom weight samples must be finite and strictly positive")
        return Weight(spec, np.log(values), kind, {})
    raise ValueError(f"unknown weight kind '{kind}'")


def weight_slice(w: Weight, axis: int, index: Sequence[int]) -> Weight:
    """One-variable slice along `axis`, the other coordinates fixed at `index` (grid indices)."""
    d = w.spec.dimension
    if not 0 <= axis < d or len(index) != d - 1:
        raise ValueError(f"slice along axis {axis} needs {d - 1} fixed indices, got {tuple(index)}")

    def take(logs: np.ndarray) -> np.ndarray:
        fixed = list(index)
        fixed.insert(axis, slice(None))
        return logs[tuple(fixed)]

    slice_spec = GridSpec(levels=(w.spec.levels[axis],))
    generate = None
    if w.generator is not None:
        def generate(spec: GridSpec) -> np.ndarray:
            levels = list(w.spec.levels)
            levels[axis] = spec.levels[0]
            return take(w.generator(GridSpec(levels=tuple(levels))))
    return Weight(slice_spec, take(w.log_samples), f"{w.kind}-slice", {"axis": axis, "index": list(index)}, generate)


# --- Window families ---

def _window_families(spec: GridSpec, mode: str) -> List[Tuple[Tuple[int, ...], Tuple[bool, ...]]]:
    """(per-axis scales, per-axis half-shift) for dyadic and half-shifted cubes or rectangles."""
    d = spec.dimension
    if mode == "cubes":
        scale_sets = [(k,) * d for k in range(spec.max_scale + 1)]
    elif mode == "rectangles":
        scale_sets = list(itertools.product(*(range(level + 1) for level in spec.levels)))
    else:
        raise ValueError(f"unknown window mode '{mode}', expected 'cubes' or 'rectangles'")
    return [(scales, shifts) for scales in scale_sets for shifts in itertools.product((False, True), repeat=d)]


def _block_log_means(logs: np.ndarray, spec: GridSpec, scales: Tuple[int, ...], shifts: Tuple[bool, ...]) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """log of the mean of exp(logs) over every block of the window family, plus the block offsets."""
    cells = [1 << (level - k) for level, k in zip(spec.levels, scales)]
    offsets = tuple(m // 2 if shift else 0 for m, shift in zip(cells, shifts))
    rolled = np.roll(logs, tuple(-o for o in offsets), axis=tuple(range(spec.dimension)))
    shape = []
    for k, m in zip(scales, cells):
        shape += [1 << k, m]
    blocks = rolled.reshape(shape)
    axes = tuple(2 * j + 1 for j in range(spec.dimension))
    return logsumexp(blocks, axis=axes) - math.log(float(np.prod(cells))), offsets


def _describe(scales, offsets, position) -> str:
    block = ",".join(str(int(x)) for x in position)
    return f"{','.join(map(str, scales))}@{block}+{','.join(map(str, offsets))}"


def _log_characteristic(w: Weight, p: float, mode: str) -> Tuple[float, str]:
    if not np.ptp(w.log_samples):
        # constant weight: every window ratio is exactly one
        return 0.0, _describe((0,) * w.spec.dimension, (0,) * w.spec.dimension, (0,) * w.spec.dimension)
    p_dual = p / (p - 1.0)
    best, window = -np.inf, None
    for scales, shifts in _window_families(w.spec, mode):
        mean_w, offsets = _block_log_means(w.log_samples, w.spec, scales, shifts)
        mean_dual, _ = _block_log_means((1.0 - p_dual) * w.log_samples, w.spec, scales, shifts)
        values = mean_w + (p - 1.0) * mean_dual
        position = np.unravel_index(int(np.argmax(values)), values.shape)
        if values[position] > best:
            best, window = float(values[position]), _describe(scales, offsets, position)
    return best, window


def _coarse_spec(spec: GridSpec) -> Optional[GridSpec]:
    steps = int(round(math.log2(settings.STABILITY_REFINEMENT)))
    if min(spec.levels) - steps < 2:
        return None
    return spec.coarsened(steps)


def _to_estimate(log_value: float) -> Tuple[float, bool]:
    if log_value > LOG_CEILING:
        return math.exp(LOG_CEILING), True
    # Jensen: the characteristic of every window is at least one.
    return max(math.exp(log_value), 1.0), False


def ap_characteristic(w: Weight, p: float, mode: str = "cubes", tolerance: Optional[float] = None, check_stability: bool = True) -> ApReport:
    """sup over windows of (avg w)(avg w^{1-p'})^{p-1}, with a two-resolution stability verdict."""
    if not p > 1:
        raise ValueError(f"A_p needs p > 1, got {p}")
    tolerance = settings.STABILITY_TOLERANCE if tolerance is None else tolerance
    log_value, window = _log_characteristic(w, p, mode)
    estimate, clamped = _to_estimate(log_value)
    if clamped:
        logger.warning(f"A_{p:g} estimate of the {w.kind} weight overflows; reported value is clamped.")

    coarse_estimate, stable = None, None
    coarse = _coarse_spec(w.spec) if check_stability else None
    if coarse is not None:
        coarse_log, _ = _log_characteristic(w.at_resolution(coarse), p, mode)
        coarse_estimate, coarse_clamped = _to_estimate(coarse_log)
        stable = not (clamped or coarse_clamped) and estimate <= coarse_estimate * (1.0 + tolerance)
    logger.debug(f"A_{p:g} ({mode}) of {w.kind} weight: {estimate:.4g} (coarse {coarse_estimate}), stable={stable}.")
    return ApReport(
        p=p, mode=mode, estimate=estimate, window=window, coarse_estimate=coarse_estimate, stable=stable, clamped=clamped
    )


def a_infinity_probe(w: Weight, q_max: float = 16.0, iterations: int = 12, mode: str = "cubes") -> AInfinityReport:
    """Smallest q in (1, q_max] whose A_q estimate is resolution-stable, by bisection."""
    def stable(q: float) -> Tuple[bool, float]:
        report = ap_characteristic(w, q, mode)
        return bool(report.stable), report.estimate

    top_ok, top_estimate = stable(q_max)
    if not top_ok:
        logger.info(f"{w.kind} weight shows no stable A_q up to q={q_max:g}.")
        return AInfinityReport(q_w=None, stable=False, q_max=q_max, estimate=top_estimate)
    floor_ok, floor_estimate = stable(A_INFINITY_FLOOR)
    if floor_ok:
        return AInfinityReport(q_w=A_INFINITY_FLOOR, stable=True, floor_reached=True, q_max=q_max, estimate=floor_estimate)

    low, high, estimate = A_INFINITY_FLOOR, q_max, top_estimate
    for _ in range(iterations):
        middle = 0.5 * (low + high)
        ok, value = stable(middle)
        if ok:
            high, estimate = middle, value
        else:
            low = middle
    logger.info(f"{w.kind} weight: smallest stable A_q found at q={high:.4g}.")
    return AInfinityReport(q_w=high, stable=True, q_max=q_max, estimate=estimate)


# --- Maximal operators ---

def _dyadic_sizes(spec: GridSpec, mode: str) -> List[Tuple[int, ...]]:
    return [tuple(1 << (level - k) for level, k in zip(spec.levels, scales)) for scales, shifts in _window_families(spec, mode) if not any(shifts)]


def maximal_function(f: GridFunction, mode: str = "cubes") -> GridFunction:
    """Uncentered maximal function over windows of dyadic side at every grid position."""
    if not f.is_scalar:
        raise ValueError("maximal_function works on scalar functions")
    values = np.abs(f.values)
    best = values.copy()
    for sizes in _dyadic_sizes(f.spec, mode):
        if all(s == 1 for s in sizes):
            continue
        # mean over the window starting at each point, then max over the starts covering it
        means = ndimage.uniform_filter(values, size=sizes, mode="wrap", origin=[-(s // 2) for s in sizes])
        covering = ndimage.maximum_filter(means, size=sizes, mode="wrap", origin=[(s - 1) // 2 for s in sizes])
        np.maximum(best, covering, out=best)
    return GridFunction(f.spec, best)


# --- Reverse Hoelder ---

def _log_reverse_holder(w: Weight, epsilon: float) -> float:
    best = -np.inf
    for scales, shifts in _window_families(w.spec, "cubes"):
        mean_w, _ = _block_log_means(w.log_samples, w.spec, scales, shifts)
        mean_power, _ = _block_log_means((1.0 + epsilon) * w.log_samples, w.spec, scales, shifts)
        best = max(best, float(np.max(mean_power / (1.0 + epsilon) - mean_w)))
    return best


def reverse_holder_exponent(w: Weight, tolerance: Optional[float] = None) -> ReverseHolderReport:
    """Largest resolution-stable epsilon with (avg w^{1+eps})^{1/(1+eps)} <= K avg w on all cubes."""
    tolerance = settings.STABILITY_TOLERANCE if tolerance is None else tolerance
    coarse = _coarse_spec(w.spec)
    coarse_weight = w.at_resolution(coarse) if coarse is not None else None

    def constant(epsilon: float) -> Tuple[bool, float]:
        fine, fine_clamped = _to_estimate(_log_reverse_holder(w, epsilon))
        if coarse_weight is None:
            return not fine_clamped, fine
        rough, rough_clamped = _to_estimate(_log_reverse_holder(coarse_weight, epsilon))
        return not (fine_clamped or rough_clamped) and fine <= rough * (1.0 + tolerance), fine

    ok, value = constant(REVERSE_HOLDER_FLOOR)
    if not ok:
        logger.warning(f"{w.kind} weight has no stable reverse Hoelder exponent above {REVERSE_HOLDER_FLOOR:g}.")
        return ReverseHolderReport(epsilon=0.0, constant=value, degenerate=True)

    low, low_value, high = REVERSE_HOLDER_FLOOR, value, None
    while high is None:
        candidate = 2.0 * low
        if candidate > REVERSE_HOLDER_CEILING:
            return ReverseHolderReport(epsilon=low, constant=low_value, ceiling_reached=True)
        ok, value = constant(candidate)
        if ok:
            low, low_value = candidate, value
        else:
            high = candidate
    for _ in range(8):
        middle = 0.5 * (low + high)
        ok, value = constant(middle)
        if ok:
            low, low_value = middle, value
        else:
            high = middle
    return ReverseHolderReport(epsilon=low, constant=low_value, degenerate=low <= REVERSE_HOLDER_DEGENERATE)
