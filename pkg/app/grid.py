"""Dyadic geometry on the periodic unit cube and the sampled-function substrate."""

import json
import logging
import struct
from dataclasses import dataclass
from typing import Callable, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import settings
from .exceptions import GridError
from .models import GridSpec

logger = logging.getLogger(__name__)

_HEADER_LENGTH = struct.Struct("<Q")


# --- Dyadic cubes ---

@dataclass(frozen=True, order=True)
class DyadicCube:
    """Cube of side 2^{-scale} with integer position in [0, 2^scale)^d."""
    scale: int
    position: Tuple[int, ...]

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"negative scale {self.scale}")
        if not self.position:
            raise ValueError("a cube needs at least one coordinate")
        limit = 1 << self.scale
        if any(not 0 <= x < limit for x in self.position):
            raise ValueError(f"position {self.position} outside [0, {limit})^d at scale {self.scale}")

    @classmethod
    def root(cls, d: int) -> "DyadicCube":
        return cls(0, (0,) * d)

    @classmethod
    def from_id(cls, text: str) -> "DyadicCube":
        k, *xs = (int(t) for t in text.split())
        return cls(k, tuple(xs))

    @property
    def cube_id(self) -> str:
        return " ".join(str(v) for v in (self.scale, *self.position))

    @property
    def dimension(self) -> int:
        return len(self.position)

    @property
    def side(self) -> float:
        return 2.0 ** (-self.scale)

    @property
    def measure(self) -> float:
        return 2.0 ** (-self.scale * self.dimension)

    def parent(self) -> Optional["DyadicCube"]:
        if self.scale == 0:
            return None
        return DyadicCube(self.scale - 1, tuple(x >> 1 for x in self.position))

    def ancestors(self, cap: int = 0) -> List["DyadicCube"]:
        """Proper ancestors with scale >= cap, finest first."""
        out = []
        cube = self.parent()
        while cube is not None and cube.scale >= cap:
            out.append(cube)
            cube = cube.parent()
        return out

    def ancestor(self, scale: int) -> "DyadicCube":
        shift = self.scale - scale
        if shift < 0:
            raise ValueError(f"scale {scale} is finer than {self.scale}")
        return DyadicCube(scale, tuple(x >> shift for x in self.position))

    def children(self) -> List["DyadicCube"]:
        base = tuple(2 * x for x in self.position)
        out = []
        for bits in range(1 << self.dimension):
            offset = tuple((bits >> (self.dimension - 1 - j)) & 1 for j in range(self.dimension))
            out.append(DyadicCube(self.scale + 1, tuple(b + o for b, o in zip(base, offset))))
        return out

    def contains(self, other: "DyadicCube") -> bool:
        shift = other.scale - self.scale
        if shift < 0:
            return False
        return all((o >> shift) == s for o, s in zip(other.position, self.position))

    def intersects(self, other: "DyadicCube") -> bool:
        return self.contains(other) or other.contains(self)

    def corner_key(self, finest: int) -> Tuple[int, ...]:
        """Lower corner in units of 2^{-finest}."""
        return tuple(x << (finest - self.scale) for x in self.position)

    # --- grid views ---

    def cells_per_axis(self, spec: GridSpec) -> Tuple[int, ...]:
        if self.dimension != spec.dimension:
            raise GridError(f"cube of dimension {self.dimension} on a {spec.dimension}-dimensional grid")
        if self.scale > spec.max_scale:
            raise GridError(f"cube {self.cube_id} is finer than the grid (max scale {spec.max_scale})")
        return tuple(1 << (level - self.scale) for level in spec.levels)

    def slices(self, spec: GridSpec) -> Tuple[slice, ...]:
        cells = self.cells_per_axis(spec)
        return tuple(slice(x * m, (x + 1) * m) for x, m in zip(self.position, cells))

    def indicator(self, spec: GridSpec) -> np.ndarray:
        mask = np.zeros(spec.shape, dtype=bool)
        mask[self.slices(spec)] = True
        return mask

    def distance(self, spec: GridSpec) -> np.ndarray:
        """Torus distance from every cell centre to the cube (0 inside)."""
        cells = self.cells_per_axis(spec)
        total = None
        for axis, (n, m, x) in enumerate(zip(spec.shape, cells, self.position)):
            offset = (np.arange(n) - x * m) % n
            after = offset - m + 0.5
            before = n - offset - 0.5
            d_axis = np.where(offset < m, 0.0, np.minimum(after, before)) / n
            shape = [1] * spec.dimension
            shape[axis] = n
            sq = (d_axis ** 2).reshape(shape)
            total = sq if total is None else total + sq
        return np.sqrt(np.broadcast_to(total, spec.shape))

    def decay_window(self, spec: GridSpec, decay: float) -> np.ndarray:
        """chi-tilde: (1 + dist(x, I)/side)^{-decay}."""
        return np.power(1.0 + self.distance(spec) / self.side, -decay)

    def dilate(self, spec: GridSpec, ell: int) -> np.ndarray:
        """Cells of the concentric dilate 2^ell I; wraps around the torus."""
        cells = self.cells_per_axis(spec)
        mask = None
        for axis, (n, m, x) in enumerate(zip(spec.shape, cells, self.position)):
            width = m << ell
            if width >= n:
                axis_mask = np.ones(n, dtype=bool)
            else:
                start = x * m + m // 2 - width // 2
                axis_mask = ((np.arange(n) - start) % n) < width
            shape = [1] * spec.dimension
            shape[axis] = n
            axis_mask = axis_mask.reshape(shape)
            mask = axis_mask if mask is None else mask & axis_mask
        return np.broadcast_to(mask, spec.shape).copy()

    def __str__(self) -> str:
        return self.cube_id


def cubes_at_scale(d: int, scale: int) -> Iterator[DyadicCube]:
    for flat in range(1 << (scale * d)):
        yield DyadicCube(scale, tuple(int(v) for v in np.unravel_index(flat, (1 << scale,) * d)))


# --- Block reductions ---

def block_view(values: np.ndarray, spec: GridSpec, scale: int) -> np.ndarray:
    """Reshape grid-leading data to (2^k, m_1, ..., 2^k, m_d, *rest)."""
    if scale > spec.max_scale:
        raise GridError(f"scale {scale} is finer than the grid (max {spec.max_scale})")
    shape = []
    for level in spec.levels:
        shape += [1 << scale, 1 << (level - scale)]
    return values.reshape(tuple(shape) + values.shape[spec.dimension:])


def block_reduce(values: np.ndarray, spec: GridSpec, scale: int, reducer: Callable = np.mean) -> np.ndarray:
    """Reduce every dyadic cube of the given scale to one value."""
    axes = tuple(2 * j + 1 for j in range(spec.dimension))
    return reducer(block_view(values, spec, scale), axis=axes)


def expand_blocks(table: np.ndarray, spec: GridSpec, scale: int) -> np.ndarray:
    """Inverse of block_reduce: repeat one value per cube over its cells."""
    d = spec.dimension
    rest = table.shape[d:]
    shape, target = [], []
    for level in spec.levels:
        shape += [1 << scale, 1]
        target += [1 << scale, 1 << (level - scale)]
    out = np.broadcast_to(table.reshape(tuple(shape) + rest), tuple(target) + rest)
    return out.reshape(spec.shape + rest)


def _upsample(table: np.ndarray) -> np.ndarray:
    """Per-cube table at scale k-1 → table at scale k (each parent value on its 2^d children)."""
    for axis in range(table.ndim):
        table = np.repeat(table, 2, axis=axis)
    return table


# --- Collections ---

@dataclass(frozen=True)
class Collection:
    """Finite family of dyadic cubes with a closure cap scale."""
    cubes: FrozenSet[DyadicCube] = frozenset()
    cap: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cubes", frozenset(self.cubes))
        dims = {c.dimension for c in self.cubes}
        if len(dims) > 1:
            raise ValueError(f"mixed cube dimensions in one collection: {sorted(dims)}")
        if self.cap < 0:
            raise ValueError(f"negative cap scale {self.cap}")

    @classmethod
    def of(cls, cubes: Iterable[DyadicCube], cap: Optional[int] = None) -> "Collection":
        return cls(frozenset(cubes), settings.CLOSURE_CAP_SCALE if cap is None else cap)

    @classmethod
    def full(cls, d: int, max_scale: int, min_scale: int = 0) -> "Collection":
        """Every dyadic cube with min_scale <= scale <= max_scale."""
        cubes = [c for k in range(min_scale, max_scale + 1) for c in cubes_at_scale(d, k)]
        return cls(frozenset(cubes), min(settings.CLOSURE_CAP_SCALE, min_scale))

    def __len__(self) -> int:
        return len(self.cubes)

    def __iter__(self) -> Iterator[DyadicCube]:
        return iter(sorted(self.cubes))

    def __contains__(self, cube: object) -> bool:
        return cube in self.cubes

    @property
    def dimension(self) -> Optional[int]:
        for cube in self.cubes:
            return cube.dimension
        return None

    @property
    def finest_scale(self) -> int:
        return max((c.scale for c in self.cubes), default=0)

    def with_cubes(self, cubes: Iterable[DyadicCube]) -> "Collection":
        return Collection(frozenset(cubes), self.cap)

    def maximal(self) -> List[DyadicCube]:
        """Members not strictly contained in another member."""
        members = self.cubes
        return sorted(c for c in members if not any(a in members for a in c.ancestors()))

    def containing(self, cube: DyadicCube) -> List[DyadicCube]:
        """Members that contain the given cube (itself included)."""
        return [c for c in [cube, *cube.ancestors()] if c in self.cubes]

    def to_text(self) -> str:
        return "".join(c.cube_id + "\n" for c in self)

    @classmethod
    def from_text(cls, text: str, cap: Optional[int] = None) -> "Collection":
        cubes = [DyadicCube.from_id(line) for line in text.splitlines() if line.strip()]
        return cls.of(cubes, cap)


def relevant_closure(c: Collection, cap: Optional[int] = None) -> Collection:
    """All dyadic J containing some member, with scale >= cap."""
    cap = c.cap if cap is None else cap
    closure = set(c.cubes)
    for cube in c.cubes:
        for ancestor in cube.ancestors(cap):
            if ancestor in closure:
                # every coarser ancestor is already in the closure
                break
            closure.add(ancestor)
    logger.debug(f"Closure of {len(c)} cubes at cap {cap}: {len(closure)} cubes.")
    return Collection(frozenset(closure), cap)


def restrict(c: Collection, I0: DyadicCube) -> Collection:
    """Members of c contained in I0."""
    return c.with_cubes(cube for cube in c.cubes if I0.contains(cube))


# --- Maximal dyadic covers ---

@dataclass(frozen=True)
class Cover:
    """Maximal dyadic cubes inside a set plus the cells they leave uncovered."""
    cubes: List[DyadicCube]
    residual: np.ndarray

    def __iter__(self) -> Iterator[DyadicCube]:
        return iter(self.cubes)

    def __len__(self) -> int:
        return len(self.cubes)

    @property
    def residual_cells(self) -> int:
        return int(self.residual.sum())


def maximal_cover(region: Union[np.ndarray, Iterable[DyadicCube]], spec: GridSpec) -> Cover:
    """Disjoint maximal dyadic cubes whose union is the dyadic interior of the region."""
    if isinstance(region, np.ndarray):
        mask = np.asarray(region, dtype=bool)
        if mask.shape != spec.shape:
            raise GridError(f"mask shape {mask.shape} does not match grid {spec.shape}")
    else:
        mask = np.zeros(spec.shape, dtype=bool)
        for cube in region:
            mask[cube.slices(spec)] = True

    finest = spec.max_scale
    cubes: List[DyadicCube] = []
    covered = np.zeros(spec.shape, dtype=bool)
    parent_full = None
    for k in range(finest + 1):
        full = block_reduce(mask, spec, k, np.all)
        fresh = full.copy()
        if parent_full is not None:
            fresh &= ~_upsample(parent_full)
        for index in zip(*np.nonzero(fresh)):
            cubes.append(DyadicCube(k, tuple(int(i) for i in index)))
        if fresh.any():
            covered |= expand_blocks(fresh, spec, k)
        parent_full = full
    cubes.sort(key=lambda c: (c.corner_key(finest), c.scale))
    residual = mask & ~covered
    if residual.any():
        logger.warning(f"maximal_cover left {int(residual.sum())} cell(s) outside the dyadic interior.")
    return Cover(cubes, residual)


# --- Sampled functions ---

@dataclass(frozen=True)
class GridFunction:
    """Samples on the grid, optionally carrying a trailing vector index (the L^Q directions)."""
    spec: GridSpec
    values: np.ndarray
    vector_shape: Tuple[int, ...] = ()

    def __post_init__(self):
        values = np.asarray(self.values)
        dtype = np.complex128 if np.iscomplexobj(values) else np.float64
        values = np.array(values, dtype=dtype, copy=True)
        expected = tuple(self.spec.shape) + tuple(self.vector_shape)
        if values.shape != expected:
            raise GridError(f"values of shape {values.shape} do not match grid x vector shape {expected}")
        if not np.all(np.isfinite(values)):
            raise GridError("GridFunction samples must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "vector_shape", tuple(self.vector_shape))

    @classmethod
    def zeros(cls, spec: GridSpec, vector_shape: Tuple[int, ...] = (), dtype=np.float64) -> "GridFunction":
        return cls(spec, np.zeros(spec.shape + tuple(vector_shape), dtype=dtype), tuple(vector_shape))

    @classmethod
    def from_callable(cls, spec: GridSpec, func: Callable[..., np.ndarray]) -> "GridFunction":
        """Sample func(x_1, ..., x_d) at x_i = i 2^{-L}."""
        values = np.broadcast_to(func(*sample_points(spec)), spec.shape)
        return cls(spec, values)

    @property
    def is_scalar(self) -> bool:
        return self.vector_shape == ()

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    def abs(self) -> "GridFunction":
        return GridFunction(self.spec, np.abs(self.values), self.vector_shape)

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.spec, values, self.vector_shape)

    def component(self, index: Tuple[int, ...]) -> "GridFunction":
        return GridFunction(self.spec, self.values[(Ellipsis,) + tuple(index)])

    def _check_compatible(self, other: "GridFunction"):
        if other.spec != self.spec or other.vector_shape != self.vector_shape:
            raise GridError("grid functions live on different grids or vector shapes")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        return self.with_values(self.values - other.values)

    def __mul__(self, scalar: complex) -> "GridFunction":
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "levels": list(self.spec.levels),
                "groups": list(self.spec.groups),
                "vector_shape": list(self.vector_shape),
                "complex": self.is_complex,
            },
            sort_keys=True,
        ).encode("utf-8")
        data = self.values.view(np.float64) if self.is_complex else self.values
        return _HEADER_LENGTH.pack(len(header)) + header + np.ascontiguousarray(data, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GridFunction":
        (length,) = _HEADER_LENGTH.unpack_from(blob)
        start = _HEADER_LENGTH.size
        header = json.loads(blob[start:start + length].decode("utf-8"))
        spec = GridSpec(levels=tuple(header["levels"]), groups=tuple(header["groups"]))
        vector_shape = tuple(header["vector_shape"])
        data = np.frombuffer(blob, dtype="<f8", offset=start + length).astype(np.float64)
        if header["complex"]:
            data = data.view(np.complex128)
        return cls(spec, data.reshape(spec.shape + vector_shape), vector_shape)


def sample_points(spec: GridSpec) -> Tuple[np.ndarray, ...]:
    """Open-mesh coordinates x_i = i 2^{-L_j}, ready for broadcasting."""
    return tuple(np.meshgrid(*[np.arange(n) / n for n in spec.shape], indexing="ij", sparse=True))


def torus_distance(spec: GridSpec, point: Sequence[float]) -> np.ndarray:
    """Euclidean wrap-around distance from every sample point to the given point."""
    total = 0.0
    for x, c in zip(sample_points(spec), point):
        delta = np.abs(x - c) % 1.0
        total = total + np.minimum(delta, 1.0 - delta) ** 2
    return np.sqrt(np.broadcast_to(total, spec.shape))


def measure(mask: np.ndarray, spec: GridSpec) -> float:
    """Lebesgue measure of a union of grid cells."""
    return float(np.count_nonzero(mask)) * spec.cell_measure
