"""Exceptional sets, dyadic stopping times and sparse families."""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import settings
from .decomposition import synthesize
from .exceptions import BudgetError, MajorSubsetError, SparseInvariantError
from .filters import LacunaryFamily
from .grid import Collection, DyadicCube, GridFunction, maximal_cover, measure, restrict
from .models import GridSpec
from .norms import local_sf_average, lp_norm, reduce_vector, smoothed_average
from .square_functions import CoefficientMap, SquareFunctionResult, SquareSumTables
from .weights import Weight, maximal_function

logger = logging.getLogger(__name__)

DIRECTIONS = ("sf-average", "size-average")
MAX_DOUBLINGS = 60


def _pointwise(sf: SquareFunctionResult, q: Sequence[float]) -> np.ndarray:
    values = sf.values
    if sf.function.is_scalar:
        return np.abs(values)
    if len(q) != len(sf.function.vector_shape):
        raise ValueError(f"vector square function needs {len(sf.function.vector_shape)} inner exponents, got {tuple(q)}")
    return reduce_vector(values, q)


# --- Exceptional sets ---

@dataclass(frozen=True, eq=False)
class ExceptionalSets:
    """Omega_k = {s > C 2^{e k/p} ||s||_p}, their maximal dilates and the union Omega."""
    spec: GridSpec
    C: float
    p: float
    norm: float
    omegas: Dict[int, np.ndarray]
    dilates: Dict[int, np.ndarray]
    union: np.ndarray
    budget: float

    @property
    def measure(self) -> float:
        return measure(self.union, self.spec)

    def measures(self) -> Dict[int, Tuple[float, float]]:
        return {k: (measure(self.omegas[k], self.spec), measure(self.dilates[k], self.spec)) for k in self.omegas}

    def chebyshev_ratios(self, exponent: Optional[float] = None) -> Dict[int, float]:
        """|Omega_k| / (2^{-e k} C^{-p}): at most one by Chebyshev."""
        exponent = settings.EXCEPTIONAL_EXPONENT if exponent is None else exponent
        return {k: m / (2.0 ** (-exponent * k) * self.C ** (-self.p)) for k, (m, _) in self.measures().items()}

    def dilation_ratios(self) -> Dict[int, float]:
        """|Omega~_k| / (2^k |Omega_k|), the recorded maximal-function constant."""
        return {k: (t / (2.0 ** k * m) if m > 0 else 0.0) for k, (m, t) in self.measures().items()}


def _exceptional_at(s: np.ndarray, spec: GridSpec, C: float, p: float, norm: float, exponent: float):
    omegas, dilates = {}, {}
    union = np.zeros(spec.shape, dtype=bool)
    peak = float(s.max(initial=0.0))
    k = 0
    while True:
        threshold = C * 2.0 ** (exponent * k / p) * norm
        if threshold >= peak:
            break
        omega = s > threshold
        dilate = maximal_function(GridFunction(spec, omega.astype(float))).values > 2.0 ** (-k)
        omegas[k], dilates[k] = omega, dilate
        union |= dilate
        k += 1
    return omegas, dilates, union


def build_exceptional_sets(
    sf: SquareFunctionResult,
    p: float,
    q: Sequence[float] = (),
    budget: Optional[float] = None,
    C: float = 1.0,
    C_max: float = 2.0 ** 20,
) -> ExceptionalSets:
    """Double C until |Omega| < budget."""
    budget = settings.EXCEPTIONAL_BUDGET if budget is None else budget
    exponent = settings.EXCEPTIONAL_EXPONENT
    spec = sf.function.spec
    s = _pointwise(sf, q)
    norm = lp_norm(s, spec, p)
    while True:
        omegas, dilates, union = _exceptional_at(s, spec, C, p, norm, exponent)
        if measure(union, spec) < budget:
            break
        if C * 2 > C_max:
            logger.error(f"Exceptional set still has measure {measure(union, spec):.4g} at C={C:g}.")
            raise BudgetError(f"exceptional-set budget {budget} unattainable up to C={C_max:g}")
        C *= 2
        logger.debug(f"Exceptional set over budget; doubling C to {C:g}.")
    result = ExceptionalSets(spec, C, p, norm, omegas, dilates, union, budget)
    logger.info(f"Exceptional set at C={C:g}: {len(omegas)} level(s), |Omega|={result.measure:.4g}.")
    return result


def major_subset(F: np.ndarray, exc: ExceptionalSets) -> np.ndarray:
    """F minus Omega, which must keep at least half of F."""
    F = np.asarray(getattr(F, "values", F)).astype(bool)
    kept = F & ~exc.union
    if 2 * np.count_nonzero(kept) < np.count_nonzero(F):
        raise MajorSubsetError(
            f"removing Omega keeps {np.count_nonzero(kept)} of {np.count_nonzero(F)} cells of F: increase C"
        )
    return kept


# --- Stopping times ---

@dataclass
class StoppingLevel:
    n: int
    threshold: float
    heads: List[DyadicCube]
    members: Dict[DyadicCube, List[DyadicCube]]


@dataclass
class StoppingDecomposition:
    """Levels of selected maximal cubes; every cube of the collection sits under exactly one head."""
    direction: str
    reference: float
    levels: List[StoppingLevel] = field(default_factory=list)

    def assignment(self) -> Dict[DyadicCube, Tuple[int, DyadicCube]]:
        out = {}
        for level in self.levels:
            for head, members in level.members.items():
                for cube in members:
                    out[cube] = (level.n, head)
        return out

    def heads(self, n: int) -> List[DyadicCube]:
        return next((level.heads for level in self.levels if level.n == n), [])

    def to_json(self) -> str:
        return json.dumps(
            {
                "direction": self.direction,
                "reference": self.reference,
                "levels": [
                    {
                        "n": level.n,
                        "threshold": level.threshold,
                        "heads": {head.cube_id: [c.cube_id for c in level.members[head]] for head in level.heads},
                    }
                    for level in self.levels
                ],
            },
            sort_keys=True,
        )


def stopping_time(
    coeffs: CoefficientMap,
    c: Collection,
    direction: str,
    reference: float,
    p: float,
    spec: GridSpec,
    q: Sequence[float] = (),
    E: Optional[np.ndarray] = None,
    decay: Optional[float] = None,
) -> StoppingDecomposition:
    """Select maximal cubes whose average reaches reference/2^n, level by level, until c is exhausted."""
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction '{direction}', expected one of {DIRECTIONS}")
    if not reference > 0:
        raise ValueError(f"reference value must be positive, got {reference}")
    decomposition = StoppingDecomposition(direction, reference)
    if not len(c):
        return decomposition

    if direction == "sf-average":
        tables = SquareSumTables(coeffs, c, spec)
        averages = {I: local_sf_average(coeffs, c, I, p, spec, q, tables) for I in c.cubes}

        def reaches(value: float, threshold: float) -> bool:
            return value >= threshold
    else:
        if E is None:
            raise ValueError("the size direction needs the set E")
        decay = settings.DECAY_EXPONENT if decay is None else decay
        indicator = (np.asarray(getattr(E, "values", E)) != 0).astype(float)
        averages = {I: smoothed_average(indicator, I, decay, spec) for I in c.cubes}

        def reaches(value: float, threshold: float) -> bool:
            return value > threshold

    remaining = set(c.cubes)
    n = 1
    while remaining:
        threshold = reference / 2.0 ** n
        selected = [I for I in remaining if reaches(averages[I], threshold)]
        if not selected:
            top = max(averages[I] for I in remaining)
            if top > 0:
                # jump straight to the first level some remaining cube reaches
                n = max(n + 1, int(math.floor(math.log2(reference / top))))
                while not reaches(top, reference / 2.0 ** n):
                    n += 1
                continue
            threshold, selected = 0.0, list(remaining)
        chosen = set(selected)
        heads = sorted(I for I in chosen if not any(a in chosen for a in I.ancestors()))
        members = {head: sorted(J for J in remaining if head.contains(J)) for head in heads}
        for group in members.values():
            remaining.difference_update(group)
        decomposition.levels.append(StoppingLevel(n, threshold, heads, members))
        if len(decomposition.levels) > len(c):
            raise RuntimeError("stopping time produced more levels than cubes")
        n += 1
    logger.info(f"Stopping time ({direction}) split {len(c)} cubes into {len(decomposition.levels)} level(s).")
    return decomposition


@dataclass
class BucketIntersection:
    """(n1, I1, n2, I2) -> cubes; each cube of c appears in exactly one bucket."""
    buckets: Dict[Tuple[int, DyadicCube, int, DyadicCube], List[DyadicCube]]
    exhaustive: bool
    nested: bool


def intersect_decompositions(d1: StoppingDecomposition, d2: StoppingDecomposition, c: Collection) -> BucketIntersection:
    a1, a2 = d1.assignment(), d2.assignment()
    buckets: Dict[Tuple[int, DyadicCube, int, DyadicCube], List[DyadicCube]] = {}
    nested = True
    for cube in c:
        if cube not in a1 or cube not in a2:
            raise ValueError(f"cube {cube.cube_id} is missing from one of the decompositions")
        (n1, I1), (n2, I2) = a1[cube], a2[cube]
        nested &= I1.contains(cube) and I2.contains(cube)
        buckets.setdefault((n1, I1, n2, I2), []).append(cube)
    exhaustive = sum(len(v) for v in buckets.values()) == len(c)
    return BucketIntersection(buckets, exhaustive, nested)


def counting_ratios(decomposition: StoppingDecomposition, norm: float, p: float) -> Dict[int, float]:
    """Per level: sum |I| reference^p / (2^{np} norm^p), bounded by one for the sf direction."""
    out = {}
    for level in decomposition.levels:
        if level.threshold == 0.0 or norm == 0.0:
            continue
        total = sum(head.measure for head in level.heads)
        out[level.n] = total * decomposition.reference ** p / (2.0 ** (level.n * p) * norm ** p)
    return out


# --- Sparse families ---

@dataclass(eq=False)
class SparseFamily:
    """Generations of sparse cubes, their children, the sets E_Q and the partition of c."""
    spec: GridSpec
    generations: List[List[DyadicCube]]
    children: Dict[DyadicCube, List[DyadicCube]]
    partition: Dict[DyadicCube, List[DyadicCube]]
    constants: Dict[DyadicCube, float]
    verified: bool = False

    @property
    def cubes(self) -> List[DyadicCube]:
        return [Q for generation in self.generations for Q in generation]

    def e_mask(self, Q: DyadicCube) -> np.ndarray:
        mask = Q.indicator(self.spec)
        for child in self.children.get(Q, []):
            mask[child.slices(self.spec)] = False
        return mask

    def e_measure(self, Q: DyadicCube) -> float:
        return Q.measure - sum(child.measure for child in self.children.get(Q, []))

    def verify(self, c: Collection) -> "SparseFamily":
        """Check |E_Q| >= |Q|/2, disjoint E_Q and the exact partition of c; mark verified."""
        counts = np.zeros(self.spec.shape, dtype=np.int64)
        for Q in self.cubes:
            mask = self.e_mask(Q)
            if 2 * np.count_nonzero(mask) < np.count_nonzero(Q.indicator(self.spec)):
                raise SparseInvariantError(f"|E_Q| < |Q|/2 at {Q.cube_id}")
            counts += mask
        if counts.max(initial=0) > 1:
            raise SparseInvariantError("the sets E_Q overlap")
        assigned = [I for members in self.partition.values() for I in members]
        if len(assigned) != len(set(assigned)) or set(assigned) != set(c.cubes):
            raise SparseInvariantError("the local collections do not partition c")
        self.verified = True
        return self

    def to_json(self) -> str:
        def node(Q: DyadicCube) -> dict:
            return {
                "cube": Q.cube_id,
                "E_measure": self.e_measure(Q),
                "C": self.constants.get(Q),
                "members": [I.cube_id for I in self.partition.get(Q, [])],
                "children": [node(child) for child in self.children.get(Q, [])],
            }
        roots = self.generations[0] if self.generations else []
        return json.dumps({"verified": self.verified, "tree": [node(Q) for Q in roots]}, sort_keys=True)


def _exceptional_region(
    Q0: DyadicCube,
    C: float,
    sf_local: np.ndarray,
    sf_average: float,
    weight_maximal: np.ndarray,
    weight_average: float,
    spec: GridSpec,
) -> np.ndarray:
    region = np.zeros(spec.shape, dtype=bool)
    window = Q0.slices(spec)
    region[window] = (sf_local > C * sf_average) | (weight_maximal[window] > C * weight_average)
    return region


def sparse_construct(
    coeffs: CoefficientMap,
    c: Collection,
    w: Weight,
    p1: float,
    C: float = 2.0,
    spec: Optional[GridSpec] = None,
    q: Sequence[float] = (),
    decay: Optional[float] = None,
) -> SparseFamily:
    """Top-down sparse selection: children are the maximal cubes of the exceptional set that hold members of c."""
    if not len(c):
        raise ValueError("sparse_construct needs a nonempty collection")
    spec = spec or w.spec
    decay = settings.DECAY_EXPONENT if decay is None else decay
    tables = SquareSumTables(coeffs, c, spec)
    weight_values = w.samples

    generations: List[List[DyadicCube]] = []
    children: Dict[DyadicCube, List[DyadicCube]] = {}
    partition: Dict[DyadicCube, List[DyadicCube]] = {}
    constants: Dict[DyadicCube, float] = {}
    frontier = c.maximal()
    while frontier:
        generations.append(frontier)
        next_frontier = []
        for Q0 in frontier:
            local = restrict(c, Q0)
            sf_local = np.sqrt(tables.local_block(Q0))
            if q:
                sf_local = reduce_vector(sf_local, q)
            sf_average = local_sf_average(coeffs, c, Q0, p1, spec, q, tables)
            window = Q0.decay_window(spec, decay)
            weight_maximal = maximal_function(GridFunction(spec, weight_values * window)).values
            weight_average = smoothed_average(weight_values, Q0, decay, spec)

            C_Q = C
            for _ in range(MAX_DOUBLINGS):
                region = _exceptional_region(Q0, C_Q, sf_local, sf_average, weight_maximal, weight_average, spec)
                cover = maximal_cover(region, spec)
                kept = [Q for Q in cover if any(Q.contains(I) for I in local.cubes)]
                if Q0 not in kept and 2 * sum(Q.measure for Q in kept) <= Q0.measure:
                    break
                C_Q *= 2
                logger.debug(f"|E_Q| < |Q|/2 at {Q0.cube_id}; doubling C to {C_Q:g}.")
            else:
                raise SparseInvariantError(f"no C up to {C_Q:g} leaves half of {Q0.cube_id} outside the exceptional set")

            constants[Q0] = C_Q
            children[Q0] = kept
            partition[Q0] = sorted(I for I in local.cubes if not any(Q.contains(I) for Q in kept))
            next_frontier.extend(kept)
        frontier = sorted(next_frontier)

    family = SparseFamily(spec, generations, children, partition, constants).verify(c)
    logger.info(
        f"Sparse family: {len(family.cubes)} cube(s) in {len(generations)} generation(s), "
        f"largest C {max(constants.values()):g}."
    )
    return family


def sparse_bound_rhs(
    coeffs: CoefficientMap,
    c: Collection,
    family: SparseFamily,
    w: Weight,
    p: float,
    p1: float,
    eps_p: float = 0.0,
    variant: str = "average",
    q: Sequence[float] = (),
    decay: Optional[float] = None,
) -> float:
    """sum_Q avg_{p1}(Q)^p times the smoothed L^{1+eps} weight average times |Q|, or times w(E_Q)."""
    if not family.verified:
        raise SparseInvariantError("sparse bound requested for an unverified family")
    if variant not in ("average", "mass"):
        raise ValueError(f"unknown variant '{variant}', expected 'average' or 'mass'")
    if eps_p < 0:
        raise ValueError(f"eps_p must be nonnegative, got {eps_p}")
    spec = family.spec
    decay = settings.DECAY_EXPONENT if decay is None else decay
    tables = SquareSumTables(coeffs, c, spec)
    total = 0.0
    for Q in family.cubes:
        average = local_sf_average(coeffs, c, Q, p1, spec, q, tables)
        if average == 0.0:
            continue
        if variant == "mass":
            factor = w.mass(family.e_mask(Q))
        else:
            powered = smoothed_average(w.samples ** (1.0 + eps_p), Q, decay, spec)
            factor = powered ** (1.0 / (1.0 + eps_p)) * Q.measure
        total += average ** p * factor
    return total


def interpolation_split(
    sf: SquareFunctionResult, c: Collection, alpha: float, q: Sequence[float] = ()
) -> Tuple[Collection, Collection]:
    """Cubes inside the maximal cubes of {||Sf||_Q > alpha}, and the rest."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    spec = sf.function.spec
    cover = maximal_cover(_pointwise(sf, q) > alpha, spec)
    inside = {I for I in c.cubes if any(Q.contains(I) for Q in cover)}
    return c.with_cubes(inside), c.with_cubes(c.cubes - inside)


@dataclass(frozen=True)
class LocalizationSides:
    lhs: float
    rhs: float

    @property
    def ratio(self) -> Optional[float]:
        if self.rhs == 0.0:
            return None if self.lhs == 0.0 else math.inf
        return self.lhs / self.rhs


def localization_sides(
    coeffs: CoefficientMap,
    c: Collection,
    I0: DyadicCube,
    w: Weight,
    p: float,
    p1: float,
    fam2: LacunaryFamily,
    q: Sequence[float] = (),
    decay: Optional[float] = None,
) -> LocalizationSides:
    """||sum_{I in c(I0)} a_I phi2_I||^p_{L^p(w)} against sup avg_{p1}^p over cubes in I0 times sup of w's smoothed averages above I0, times |I0|."""
    spec = fam2.spec
    decay = settings.DECAY_EXPONENT if decay is None else decay
    inside = restrict(c, I0).cubes
    local = {I: value for I, value in coeffs.items() if I in inside}
    lhs = 0.0
    if local:
        g = synthesize(local, fam2)
        values = reduce_vector(g.values, q) if q else np.abs(g.values)
        if values.ndim > spec.dimension:
            raise ValueError("vector coefficients need the inner exponents q")
        lhs = float(np.sum(values ** p * w.samples)) * spec.cell_measure

    tables = SquareSumTables(coeffs, c, spec)
    local_sup = max((local_sf_average(coeffs, c, I, p1, spec, q, tables) for I in inside), default=0.0)
    above = [J for J in c.cubes if J.contains(I0)] or [I0]
    weight_sup = max(smoothed_average(w.samples, J, decay, spec) for J in above)
    return LocalizationSides(lhs, local_sup ** p * weight_sup * I0.measure)
