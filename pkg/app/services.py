import asyncio
import hashlib
import json
import logging
import math
import platform
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
import scipy.fft as sfft

from .config import settings
from .constants import (
    CORPUS_RECIPES,
    DEFAULT_INNER_EXPONENTS,
    DEFAULT_MIXED_PAIRS,
    DEFAULT_OUTER_EXPONENTS,
    DEFAULT_PRODUCT_POWERS,
    DEFAULT_WEIGHT_POWERS,
    DENSITY_SLAB_AXIS,
    EXPERIMENT_KINDS,
    KIND_MODULES,
    MIXED_COMPONENTS,
    WEIGHTED_INNER_EXPONENT,
)
from .decomposition import analyze, synthesize
from .exceptions import ConfigurationError, GridError, PreflightError
from .filters import (
    PROFILES,
    FilterBank,
    LacunaryFamily,
    TensorFilterBank,
    build_filterbank,
    build_lacunary_family,
    build_tensor_bank,
    remove_factor_means,
)
from .grid import Collection, DyadicCube, GridFunction, maximal_cover, sample_points
from .models import (
    CorpusRecipe,
    ExperimentConfig,
    GridSpec,
    InvariantResult,
    MixedNormSpec,
    Report,
    ReportRecord,
    WeightRecipe,
)
from .norms import inputs_digest, lp_norm, mixed_norm, reduce_vector, size_indicator
from .square_functions import (
    discrete_square_function,
    inductive_square_function,
    square_function,
    tensor_square_function,
)
from .stopping import localization_sides, sparse_bound_rhs, sparse_construct
from .weights import Weight, a_infinity_probe, ap_characteristic, make_weight

# Get the logger for this module
logger = logging.getLogger(__name__)

INDUCTION_TOLERANCE = 1e-10
CONSTANCY_TOLERANCE = 1e-12


# --- Corpus Generation ---

def _frequency_grid(F: int, d: int) -> Tuple[np.ndarray, ...]:
    axis = np.arange(-F, F + 1)
    return tuple(np.meshgrid(*([axis] * d), indexing="ij"))


def _amplitude(rng: np.random.Generator) -> complex:
    return complex(rng.normal(), rng.normal())


def _translation(rng: np.random.Generator, xi: Sequence[np.ndarray]) -> np.ndarray:
    """Fourier phase of a translation by a random point of the torus."""
    x0 = rng.random(len(xi))
    return np.exp(-2j * np.pi * sum(x * c for x, c in zip(xi, x0)))


def _radius2(xi: Sequence[np.ndarray]) -> np.ndarray:
    return sum(x.astype(float) ** 2 for x in xi)


def _bump_coefficients(rng: np.random.Generator, xi: Sequence[np.ndarray], F: int) -> np.ndarray:
    sigma = F * rng.uniform(0.25, 1.0)
    return _amplitude(rng) * _translation(rng, xi) * np.exp(-_radius2(xi) / (2 * sigma ** 2))


def _chirp_coefficients(rng: np.random.Generator, xi: Sequence[np.ndarray], F: int) -> np.ndarray:
    rate = rng.uniform(-1.0, 1.0)
    r2 = _radius2(xi)
    return _amplitude(rng) * _translation(rng, xi) * np.exp(1j * np.pi * rate * r2 / F) * np.exp(-2.0 * r2 / F ** 2)


def _wavelet_coefficients(rng: np.random.Generator, xi: Sequence[np.ndarray], F: int) -> np.ndarray:
    centre = 2.0 ** int(rng.integers(1, int(math.log2(F)) + 1))
    width = centre / 4
    envelope = np.ones(xi[0].shape)
    for x in xi:
        envelope = envelope * np.exp(-((np.abs(x) - centre) ** 2) / (2 * width ** 2))
    return _amplitude(rng) * _translation(rng, xi) * envelope


COMPONENT_BUILDERS: Dict[str, Callable] = {
    "bumps": _bump_coefficients,
    "chirps": _chirp_coefficients,
    "wavelets": _wavelet_coefficients,
}


def _scalar_template(
    rng: np.random.Generator, recipe: CorpusRecipe, xi: Sequence[np.ndarray], octaves: Tuple[int, ...]
) -> np.ndarray:
    total = np.zeros(xi[0].shape, dtype=complex)
    if recipe.name == "single-band":
        support = np.ones(xi[0].shape, dtype=bool)
        for x, k in zip(xi, octaves):
            support &= np.abs(x) == 2 ** k
        for _ in range(recipe.components):
            total += _amplitude(rng) * _translation(rng, xi)
        return total * support
    for _ in range(recipe.components):
        name = recipe.name
        if name == "mixed":
            name = MIXED_COMPONENTS[int(rng.integers(len(MIXED_COMPONENTS)))]
        total += COMPONENT_BUILDERS[name](rng, xi, recipe.max_frequency)
    return total


def _fixture(rng: np.random.Generator, recipe: CorpusRecipe, spec: GridSpec) -> GridFunction:
    """Real trigonometric polynomial with |xi_j| <= F, every coefficient with some xi_j = 0 removed."""
    vector_shape = tuple(recipe.vector_shape)
    if recipe.name == "zero":
        return GridFunction.zeros(spec, vector_shape)
    d, F = spec.dimension, recipe.max_frequency
    xi = _frequency_grid(F, d)
    octaves = tuple(int(k) for k in rng.integers(1, int(math.log2(F)) + 1, size=d))

    template = np.zeros(xi[0].shape + vector_shape, dtype=complex)
    for index in np.ndindex(*vector_shape):
        template[(Ellipsis,) + index] = _scalar_template(rng, recipe, xi, octaves)
    template[np.any([x == 0 for x in xi], axis=0)] = 0.0
    energy = float(np.sqrt(np.sum(np.abs(template) ** 2)))
    if energy > 0:
        template /= energy

    coefficients = np.zeros(spec.shape + vector_shape, dtype=complex)
    coefficients[np.ix_(*[np.arange(-F, F + 1) % n for n in spec.shape])] = template
    values = sfft.ifftn(coefficients, axes=tuple(range(d)), workers=settings.FFT_WORKERS) * spec.size
    return GridFunction(spec, np.ascontiguousarray(values.real), vector_shape)


def generate_corpus(recipe: CorpusRecipe, seed: int, spec: GridSpec) -> List[GridFunction]:
    """Seeded corpus; the same (recipe, seed) gives the same functions on every grid that resolves them."""
    if recipe.name not in CORPUS_RECIPES:
        raise ConfigurationError(f"unknown corpus recipe '{recipe.name}', expected one of {CORPUS_RECIPES}")
    samples = spec.size * int(np.prod(recipe.vector_shape, dtype=np.int64))
    if samples > settings.GRID_SAMPLE_BUDGET:
        raise GridError(f"fixtures of {samples} samples exceed the budget of {settings.GRID_SAMPLE_BUDGET}")
    if recipe.name != "zero":
        if recipe.max_frequency < 2:
            raise ConfigurationError("band-limited recipes need max_frequency >= 2")
        if 2 * recipe.max_frequency >= min(spec.shape):
            raise GridError(f"max_frequency {recipe.max_frequency} needs more than {2 * recipe.max_frequency} samples per axis")

    children = np.random.SeedSequence(seed).spawn(recipe.count)
    corpus = [_fixture(np.random.default_rng(child), recipe, spec) for child in children]
    logger.info(f"Generated {len(corpus)} '{recipe.name}' fixture(s) on grid {spec.levels} (seed {seed}).")
    return corpus


def corpus_summary(corpus: Sequence[GridFunction]) -> List[Dict[str, Any]]:
    """Per-fixture sup, rms, worst per-axis mean and content digest."""
    rows = []
    for index, f in enumerate(corpus):
        values = np.abs(f.values)
        axis_means = [float(np.max(np.abs(np.mean(f.values, axis=a)), initial=0.0)) for a in range(f.spec.dimension)]
        rows.append({
            "fixture": index,
            "sup": float(values.max(initial=0.0)),
            "rms": float(np.sqrt(np.mean(values ** 2))),
            "max_axis_mean": max(axis_means),
            "digest": inputs_digest([f]),
        })
    return rows


# --- Preflight Invariant Suites ---

def _grid_nesting() -> str:
    rng = np.random.default_rng(0)
    cubes = []
    for k in rng.integers(0, 5, size=40):
        k = int(k)
        cubes.append(DyadicCube(k, tuple(int(x) for x in rng.integers(0, 1 << k, size=2))))
    for a in cubes:
        for b in cubes:
            overlap = bool(np.any(a.indicator(GridSpec(levels=(5, 5))) & b.indicator(GridSpec(levels=(5, 5)))))
            if overlap != (a.contains(b) or b.contains(a)):
                raise AssertionError(f"{a.cube_id} and {b.cube_id} overlap without nesting")
    return f"{len(cubes)} cubes pairwise nested or disjoint"


def _grid_cover() -> str:
    spec = GridSpec(levels=(5, 5))
    mask = np.zeros(spec.shape, dtype=bool)
    mask[:16, :8] = True
    mask[20:22, 4:6] = True
    mask[30, 31] = True
    cover = maximal_cover(mask, spec)
    counts = np.zeros(spec.shape, dtype=int)
    for cube in cover:
        counts[cube.slices(spec)] += 1
    if counts.max() > 1 or not np.array_equal(counts > 0, mask):
        raise AssertionError("maximal cover is not a disjoint partition of the region")
    return f"{len(cover)} maximal cubes partition the region"


def _filters_partition() -> str:
    worst = 0.0
    for profile in PROFILES:
        for spec in (GridSpec(levels=(8,)), GridSpec(levels=(5, 5))):
            worst = max(worst, build_filterbank(spec, profile=profile).partition_error())
    if worst > 1e-12:
        raise AssertionError(f"partition of unity off by {worst:.2e}")
    return f"partition error {worst:.1e}"


def _filters_mean_zero() -> str:
    spec = GridSpec(levels=(6, 6))
    worst = 0.0
    for kind in ("haar", "smooth"):
        fam = build_lacunary_family(spec, Collection.full(2, 3), 2.0, kind)
        worst = max(worst, max(fam.mean_errors().values()))
    if worst > 1e-12:
        raise AssertionError(f"lacunary profile mean {worst:.2e}")
    return f"worst relative mean {worst:.1e}"


def _single_band() -> str:
    spec = GridSpec(levels=(7,))
    (x,) = sample_points(spec)
    f = GridFunction(spec, np.cos(2 * np.pi * 8 * x))
    sf = square_function(f, build_filterbank(spec))
    error = float(np.max(np.abs(sf.values - np.abs(f.values))))
    if error > 1e-12:
        raise AssertionError(f"single-band square function differs from |f| by {error:.2e}")
    return f"|Sf - |f|| <= {error:.1e}"


def _induction_identity() -> str:
    spec = GridSpec(levels=(4, 4))
    rng = np.random.default_rng(1)
    f = remove_factor_means(GridFunction(spec, rng.normal(size=spec.shape)), [[0], [1]])
    tbank = build_tensor_bank(spec)
    direct = tensor_square_function(f, tbank).values
    inductive = inductive_square_function(f, tbank).values
    error = float(np.max(np.abs(direct - inductive))) / float(np.max(direct))
    if error > INDUCTION_TOLERANCE:
        raise AssertionError(f"induction identity off by {error:.2e}")
    return f"relative error {error:.1e}"


def _mixed_norm_oracle() -> str:
    spec = GridSpec(levels=(3, 3))
    rng = np.random.default_rng(2)
    ones = GridFunction(spec, np.ones(spec.shape))
    norm = MixedNormSpec(p=(0.5, 3.0))
    if abs(mixed_norm(ones, norm) - 1.0) > 1e-12:
        raise AssertionError("mixed norm of the constant one is not one")
    values = rng.normal(size=spec.shape)
    inner = np.mean(np.abs(values) ** 3.0, axis=1) ** (1.0 / 3.0)
    oracle = float(np.mean(inner ** 0.5) ** 2.0)
    value = mixed_norm(GridFunction(spec, values), norm)
    error = abs(value - oracle) / oracle
    if error > 1e-12:
        raise AssertionError(f"mixed norm differs from the nested sum by {error:.2e}")
    return f"relative error {error:.1e}"


def _haar_basis() -> str:
    spec = GridSpec(levels=(6,))
    rng = np.random.default_rng(3)
    values = rng.normal(size=spec.shape)
    f = GridFunction(spec, values - values.mean())
    fam = build_lacunary_family(spec, Collection.full(1, 5), 2.0, "haar")
    g = synthesize(analyze(f, fam), fam)
    error = float(np.max(np.abs(g.values - f.values))) / float(np.max(np.abs(f.values)))
    if error > 1e-10:
        raise AssertionError(f"Haar synthesis of the analysis misses f by {error:.2e}")
    return f"relative error {error:.1e}"


def _sparse_family() -> str:
    spec = GridSpec(levels=(6,))
    rng = np.random.default_rng(4)
    c = Collection.full(1, 3)
    coeffs = {cube: float(rng.normal()) for cube in c}
    family = sparse_construct(coeffs, c, make_weight("power", spec, exponent=0.0), 1.0, spec=spec)
    return f"{len(family.cubes)} sparse cube(s) verified"


def _unit_weight() -> str:
    spec = GridSpec(levels=(6, 6))
    unit = make_weight("power", spec, exponent=0.0)
    for p in (1.5, 2.0, 3.0):
        estimate = ap_characteristic(unit, p, check_stability=False).estimate
        if estimate != 1.0:
            raise AssertionError(f"[1]_A{p:g} = {estimate!r}")
    w = make_weight("power", spec, exponent=0.5)
    a2 = ap_characteristic(w, 2.0, check_stability=False).estimate
    a3 = ap_characteristic(w, 3.0, check_stability=False).estimate
    if a3 > a2 * (1.0 + 1e-12):
        raise AssertionError(f"A_3 estimate {a3:.6g} exceeds A_2 estimate {a2:.6g}")
    return f"[1]_Ap = 1; [|x|^0.5]_A2 = {a2:.4g} >= [.]_A3 = {a3:.4g}"


INVARIANT_SUITES: Dict[str, List[Tuple[str, Callable[[], str]]]] = {
    "grid": [("grid.nesting", _grid_nesting), ("grid.maximal-cover", _grid_cover)],
    "filters": [("filters.partition-of-unity", _filters_partition), ("filters.lacunary-mean-zero", _filters_mean_zero)],
    "square_functions": [("square_functions.single-band", _single_band), ("square_functions.induction", _induction_identity)],
    "norms": [("norms.mixed-norm-oracle", _mixed_norm_oracle)],
    "decomposition": [("decomposition.haar-basis", _haar_basis)],
    "stopping": [("stopping.sparse-family", _sparse_family)],
    "weights": [("weights.unit-and-nesting", _unit_weight)],
}


def verify_invariants(modules: Optional[Sequence[str]] = None) -> List[InvariantResult]:
    """Runs the invariant suites of the given modules (all of them by default)."""
    selected = list(INVARIANT_SUITES) if modules is None else list(modules)
    unknown = [m for m in selected if m not in INVARIANT_SUITES]
    if unknown:
        raise ValueError(f"unknown invariant suite(s) {unknown}, expected some of {list(INVARIANT_SUITES)}")

    results = []
    for module in selected:
        for name, check in INVARIANT_SUITES[module]:
            try:
                detail = check()
                results.append(InvariantResult(name=name, module=module, passed=True, detail=detail))
            except Exception as e:
                logger.error(f"Invariant '{name}' failed: {e}", exc_info=True)
                results.append(InvariantResult(name=name, module=module, passed=False, detail=str(e)))
    passed = sum(r.passed for r in results)
    logger.info(f"Preflight: {passed}/{len(results)} invariant(s) passed.")
    return results


def preflight(kind: str) -> List[InvariantResult]:
    """Invariant suites the experiment depends on; the first failure aborts."""
    results = verify_invariants(KIND_MODULES[kind])
    for result in results:
        if not result.passed:
            raise PreflightError(result.name, result.detail)
    return results


# --- Experiment Contexts ---

@dataclass
class ExperimentContext:
    """Fixture-independent objects of one experiment at one resolution, shared read-only by the workers."""
    kind: str
    config: ExperimentConfig
    spec: GridSpec
    vector_shape: Tuple[int, ...]
    norms: List[MixedNormSpec] = field(default_factory=list)
    inner: Tuple[float, ...] = ()
    p_values: List[float] = field(default_factory=list)
    bank: Optional[FilterBank] = None
    tbank: Optional[TensorFilterBank] = None
    collections: Dict[int, Collection] = field(default_factory=dict)
    families: Dict[Tuple[str, int], LacunaryFamily] = field(default_factory=dict)
    masks: Dict[float, np.ndarray] = field(default_factory=dict)
    sizes: Dict[Tuple[int, float], float] = field(default_factory=dict)
    weights: List[Tuple[str, Weight]] = field(default_factory=list)
    probes: Dict[str, Dict[str, Any]] = field(default_factory=dict)


def norm_sweep(config: ExperimentConfig, d: int, n: int) -> List[MixedNormSpec]:
    """Configured norms, or the default P/Q sweep with sub-Banach entries."""
    if config.norms:
        return list(config.norms)
    inner = [(q,) * n for q in DEFAULT_INNER_EXPONENTS] if n else [()]
    outer = [(p,) * d for p in DEFAULT_OUTER_EXPONENTS]
    if d == 2:
        outer += [tuple(pair) for pair in DEFAULT_MIXED_PAIRS]
    return [MixedNormSpec(p=P, q=Q) for P in outer for Q in inner]


def scalar_sweep(config: ExperimentConfig, d: int, n: int) -> List[MixedNormSpec]:
    """L^p(L^Q) with one spatial exponent per configured p."""
    if config.norms:
        return list(config.norms)
    inner = [(q,) * n for q in DEFAULT_INNER_EXPONENTS] if n else [()]
    return [MixedNormSpec(p=(p,) * d, q=Q) for p in config.p_values for Q in inner]


def density_set(spec: GridSpec, density: float) -> np.ndarray:
    """Slab [0, density) along one axis, rounded to whole cells and never empty."""
    n = spec.shape[DENSITY_SLAB_AXIS]
    width = max(1, int(round(density * n)))
    mask = np.zeros(spec.shape, dtype=bool)
    index = [slice(None)] * spec.dimension
    index[DENSITY_SLAB_AXIS] = slice(0, width)
    mask[tuple(index)] = True
    return mask


def _pad(exponents: Sequence[float], d: int) -> List[float]:
    exponents = list(exponents)[:d]
    return exponents + [exponents[-1]] * (d - len(exponents))


def weight_recipes(config: ExperimentConfig, kind: str, d: int) -> List[WeightRecipe]:
    if config.weights:
        return list(config.weights)
    products = [WeightRecipe(kind="product", factor_exponents=_pad(pair, d)) for pair in DEFAULT_PRODUCT_POWERS]
    if kind == "kurtz-product":
        return products
    recipes = [WeightRecipe(kind="power", exponent=a) for a in DEFAULT_WEIGHT_POWERS]
    if kind == "weighted" and d >= 2:
        recipes += products[1:]
    return recipes


def weight_label(recipe: WeightRecipe) -> str:
    if recipe.kind == "power":
        return f"power(a={recipe.exponent:g})"
    if recipe.kind == "product":
        return f"product({','.join(f'{a:g}' for a in recipe.factor_exponents)})"
    if recipe.kind == "spikes":
        return f"spikes(s={recipe.sharpness:g})"
    return "custom"


def build_weight(recipe: WeightRecipe, spec: GridSpec, base: GridSpec) -> Weight:
    """The recipe's weight on `spec`; custom samples given on `base` are held constant on refined cells."""
    if recipe.kind == "product":
        exponents = list(recipe.factor_exponents) or [recipe.exponent] * spec.dimension
        if len(exponents) != spec.dimension:
            raise ConfigurationError(f"product weight needs {spec.dimension} factor exponents, got {exponents}")
        factors = [make_weight("power", GridSpec(levels=(level,)), exponent=a) for level, a in zip(spec.levels, exponents)]
        return make_weight("product", factors=factors)
    if recipe.kind == "custom":
        if recipe.samples is None:
            raise ConfigurationError("a custom weight recipe needs samples")
        values = np.asarray(recipe.samples, dtype=float).reshape(base.shape)
        for axis, (fine, coarse) in enumerate(zip(spec.levels, base.levels)):
            values = np.repeat(values, 1 << (fine - coarse), axis=axis)
        return make_weight("custom", spec, samples=values)
    if recipe.kind == "spikes":
        return make_weight("spikes", spec, sharpness=recipe.sharpness)
    return make_weight("power", spec, exponent=recipe.exponent)


def build_context(kind: str, config: ExperimentConfig, spec: GridSpec) -> ExperimentContext:
    """Banks, families, density sets, sizes and weights for one resolution."""
    d = spec.dimension
    vector_shape = tuple(config.corpus.vector_shape)
    n = len(vector_shape)
    ctx = ExperimentContext(kind, config, spec, vector_shape, p_values=list(config.p_values))

    if kind in ("main", "kurtz-product"):
        if kind == "kurtz-product" and d < 2:
            raise ConfigurationError("the product-weight mixed-norm check needs at least two axes")
        ctx.tbank = build_tensor_bank(spec, config.factor_dims or None)
        ctx.norms = norm_sweep(config, d, n)
    if kind == "weighted":
        ctx.bank = build_filterbank(spec)
        if d >= 2:
            ctx.tbank = build_tensor_bank(spec, config.factor_dims or None)
        ctx.inner = (WEIGHTED_INNER_EXPONENT,) * n

    if kind in ("discrete", "localization", "sparse"):
        ctx.inner = (WEIGHTED_INNER_EXPONENT,) * n
        for depth in sorted({max(1, config.family_depth // 2), config.family_depth}):
            ctx.collections[depth] = Collection.full(d, depth)
        for family_kind in config.family_kinds:
            for depth, c in ctx.collections.items():
                ctx.families[(family_kind, depth)] = build_lacunary_family(spec, c, 2.0, family_kind, decay=config.decay)
    if kind == "localization":
        ctx.p_values = [p for p in config.p_values if p <= 1]
        if not ctx.p_values:
            raise ConfigurationError("the localization estimate needs some p <= 1")

    if kind == "discrete":
        ctx.norms = scalar_sweep(config, d, n)
        full = np.ones(spec.shape, dtype=bool)
        for density in config.densities:
            ctx.masks[density] = density_set(spec, density)
        for depth, c in ctx.collections.items():
            reference = size_indicator(full, c, config.decay, spec).value
            for density, mask in ctx.masks.items():
                ctx.sizes[(depth, density)] = size_indicator(mask, c, config.decay, spec).value / reference

    if kind in ("localization", "sparse", "weighted", "kurtz-product"):
        for recipe in weight_recipes(config, kind, d):
            label = weight_label(recipe)
            w = build_weight(recipe, spec, config.grid)
            probe = a_infinity_probe(w, mode="rectangles" if recipe.kind == "product" else "cubes")
            ctx.weights.append((label, w))
            ctx.probes[label] = {"q_w": probe.q_w, "a_infinity_stable": probe.stable}

    for norm in ctx.norms:
        norm.check_shapes(spec, vector_shape)
    logger.info(f"Context for '{kind}' on grid {spec.levels}: {len(ctx.norms)} norm(s), {len(ctx.families)} family(ies), {len(ctx.weights)} weight(s).")
    return ctx


# --- Fixture Runners ---

def _pointwise_norm(values: np.ndarray, q: Sequence[float]) -> np.ndarray:
    return reduce_vector(values, q) if q else np.abs(values)


def _record(ctx: ExperimentContext, fixture: int, parameters: Dict[str, Any], lhs: float, rhs: float, **extra) -> ReportRecord:
    ratio = None
    if rhs > 0:
        ratio = lhs / rhs
    elif lhs > 0:
        extra["unbounded"] = True
    return ReportRecord(fixture=fixture, kind=ctx.kind, parameters=parameters, lhs=lhs, rhs=rhs, ratio=ratio, extra=extra)


def _norm_parameters(norm: MixedNormSpec) -> Dict[str, Any]:
    return {"norm": norm.label, "p": list(norm.p), "q": list(norm.q)}


def main_records(ctx: ExperimentContext, fixture: int, f: GridFunction) -> List[ReportRecord]:
    """||f||_{L^P(L^Q)} against the tensor square function, plus the induction identity error."""
    sf = tensor_square_function(f, ctx.tbank)
    extra: Dict[str, Any] = {}
    if len(ctx.tbank.factors) > 1:
        inductive = inductive_square_function(f, ctx.tbank)
        scale = float(np.max(sf.values, initial=0.0))
        extra["induction_error"] = float(np.max(np.abs(sf.values - inductive.values))) / scale if scale > 0 else 0.0
    return [
        _record(ctx, fixture, _norm_parameters(norm), mixed_norm(f, norm), mixed_norm(sf.function, norm), **extra)
        for norm in ctx.norms
    ]


def family_pairs(ctx: ExperimentContext) -> List[Tuple[int, LacunaryFamily, LacunaryFamily]]:
    """(depth, analysis family, synthesis family) for every ordered pair of kinds at one depth."""
    return [
        (depth, ctx.families[(a, depth)], ctx.families[(s, depth)])
        for (a, depth) in sorted(ctx.families)
        for (s, other) in sorted(ctx.families)
        if other == depth
    ]


def discrete_records(ctx: ExperimentContext, fixture: int, f: GridFunction) -> List[ReportRecord]:
    """Model operator restricted to E against the discrete square function times size(1_E)^{1/p - eps}.

    Analysis and synthesis may use different lacunary families over the same collection.
    """
    spec = ctx.spec
    expand = (1,) * len(ctx.vector_shape)
    records = []
    analyzed: Dict[str, Tuple[Any, GridFunction]] = {}
    for depth, fam1, fam2 in family_pairs(ctx):
        c = ctx.collections[depth]
        if fam1.family_id not in analyzed:
            coeffs = analyze(f, fam1)
            analyzed[fam1.family_id] = (coeffs, discrete_square_function(coeffs, c, spec).function)
        coeffs, sf = analyzed[fam1.family_id]
        g = synthesize(coeffs, fam2)
        for norm in ctx.norms:
            base = mixed_norm(sf, norm)
            exponent = 1.0 / norm.p[0] - ctx.config.epsilon
            for density in sorted(ctx.masks, reverse=True):
                mask = ctx.masks[density].reshape(spec.shape + expand)
                lhs = mixed_norm(g.with_values(g.values * mask), norm)
                size = ctx.sizes[(depth, density)]
                parameters = {
                    "family": fam1.kind,
                    "synthesis": fam2.kind,
                    "depth": depth,
                    "density": density,
                    **_norm_parameters(norm),
                }
                records.append(_record(ctx, fixture, parameters, lhs, base * size ** exponent, size=size))
    return records


def anchor_cubes(c: Collection) -> List[DyadicCube]:
    """Maximal cubes of c and their children in c."""
    roots = c.maximal()
    return roots + sorted(child for Q in roots for child in Q.children() if child in c)


def localization_records(ctx: ExperimentContext, fixture: int, f: GridFunction) -> List[ReportRecord]:
    records = []
    for (family_kind, depth), fam in sorted(ctx.families.items()):
        c = ctx.collections[depth]
        coeffs = analyze(f, fam)
        for label, w in ctx.weights:
            for p in ctx.p_values:
                for I0 in anchor_cubes(c):
                    sides = localization_sides(coeffs, c, I0, w, p, p / 2, fam, ctx.inner, ctx.config.decay)
                    parameters = {"family": family_kind, "depth": depth, "weight": label, "p": p, "p1": p / 2, "cube": I0.cube_id}
                    records.append(_record(ctx, fixture, parameters, sides.lhs, sides.rhs, **ctx.probes[label]))
    return records


def children_constant(coeffs, family, spec: GridSpec, q: Sequence[float]) -> bool:
    """The square function over the cubes kept by Q is constant on every sparse child of Q."""
    for Q in family.cubes:
        members = family.partition.get(Q, [])
        if not members or not family.children.get(Q):
            continue
        sf = discrete_square_function({I: coeffs[I] for I in members}, Collection.of(members), spec)
        values = _pointwise_norm(sf.values, q)
        peak = float(values.max(initial=0.0))
        for child in family.children[Q]:
            if np.ptp(values[child.slices(spec)]) > CONSTANCY_TOLERANCE * peak:
                return False
    return True


def sparse_records(ctx: ExperimentContext, fixture: int, f: GridFunction) -> List[ReportRecord]:
    """||T f w^{1/p}||_p^p against the sparse form, with the family's invariants."""
    spec = ctx.spec
    records = []
    for (family_kind, depth), fam in sorted(ctx.families.items()):
        c = ctx.collections[depth]
        coeffs = analyze(f, fam)
        values = _pointwise_norm(synthesize(coeffs, fam).values, ctx.inner)
        for label, w in ctx.weights:
            for p in ctx.p_values:
                p1 = p / 2
                family = sparse_construct(coeffs, c, w, p1, spec=spec, q=ctx.inner, decay=ctx.config.decay)
                eps_p = 0.0 if p <= 1 else ctx.config.epsilon
                rhs = sparse_bound_rhs(coeffs, c, family, w, p, p1, eps_p, q=ctx.inner, decay=ctx.config.decay)
                lhs = float(np.sum(values ** p * w.samples)) * spec.cell_measure
                parameters = {"family": family_kind, "depth": depth, "weight": label, "p": p, "p1": p1, "eps_p": eps_p}
                records.append(_record(
                    ctx, fixture, parameters, lhs, rhs,
                    sparse_cubes=len(family.cubes),
                    max_C=max(family.constants.values()),
                    verified=family.verified,
                    children_constant=children_constant(coeffs, family, spec, ctx.inner),
                    **ctx.probes[label],
                ))
    return records


def weighted_records(ctx: ExperimentContext, fixture: int, f: GridFunction) -> List[ReportRecord]:
    """||f||_{L^p(w)} against ||Sf||_{L^p(w)}, one-parameter and (d >= 2) multi-parameter."""
    spec = ctx.spec
    variants = [("one-parameter", square_function(f, ctx.bank))]
    if ctx.tbank is not None and len(ctx.tbank.factors) > 1:
        variants.append(("multi-parameter", tensor_square_function(f, ctx.tbank)))
    f_values = _pointwise_norm(f.values, ctx.inner)
    sf_values = [(name, _pointwise_norm(result.values, ctx.inner)) for name, result in variants]
    records = []
    for label, w in ctx.weights:
        for p in ctx.p_values:
            lhs = lp_norm(f_values, spec, p, weight=w)
            for name, values in sf_values:
                parameters = {"variant": name, "weight": label, "p": p}
                records.append(_record(ctx, fixture, parameters, lhs, lp_norm(values, spec, p, weight=w), **ctx.probes[label]))
    return records


def kurtz_records(ctx: ExperimentContext, fixture: int, f: GridFunction) -> List[ReportRecord]:
    """Weighted mixed norms of f and of its tensor square function under product weights."""
    sf = tensor_square_function(f, ctx.tbank)
    records = []
    for label, w in ctx.weights:
        for norm in ctx.norms:
            parameters = {"weight": label, **_norm_parameters(norm)}
            lhs = mixed_norm(f, norm, weight=w)
            rhs = mixed_norm(sf.function, norm, weight=w)
            records.append(_record(ctx, fixture, parameters, lhs, rhs, **ctx.probes[label]))
    return records


RUNNERS: Dict[str, Callable[[ExperimentContext, int, GridFunction], List[ReportRecord]]] = {
    "main": main_records,
    "discrete": discrete_records,
    "localization": localization_records,
    "sparse": sparse_records,
    "weighted": weighted_records,
    "kurtz-product": kurtz_records,
}


# --- Report Assembly ---

def environment_digest() -> str:
    """Library versions that can change floating-point results; thread counts are deliberately absent."""
    payload = {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _max_ratio(records: Sequence[ReportRecord], attribute: str) -> Optional[float]:
    values = [getattr(r, attribute) for r in records if getattr(r, attribute) is not None]
    return max(values) if values else None


def experiment_invariants(kind: str, records: Sequence[ReportRecord], config: Optional[ExperimentConfig] = None) -> Dict[str, bool]:
    """Per-kind checks over the recorded values."""
    out: Dict[str, bool] = {}
    if kind in ("localization", "sparse") and config is not None:
        # the decay of the smoothed averages must beat d q_w for every probed weight
        indices = [r.extra["q_w"] for r in records if r.extra.get("q_w") is not None]
        out["decay-dominates-weight"] = all(config.grid.dimension * q < config.decay for q in indices)
    if kind == "main":
        errors = [r.extra["induction_error"] for r in records if "induction_error" in r.extra]
        if errors:
            out["induction-identity"] = max(errors) <= INDUCTION_TOLERANCE
    if kind == "discrete":
        full = [r.extra["size"] for r in records if r.parameters["density"] == 1.0]
        if full:
            out["discrete-full-torus-size"] = all(size == 1.0 for size in full)
        groups: Dict[Tuple, List[Tuple[float, float]]] = {}
        for r in records:
            key = (r.fixture, r.parameters["family"], r.parameters["synthesis"], r.parameters["depth"], r.parameters["norm"])
            groups.setdefault(key, []).append((r.parameters["density"], r.extra["size"]))
        monotone = True
        for pairs in groups.values():
            sizes = [size for _, size in sorted(pairs)]
            monotone &= all(a <= b for a, b in zip(sizes, sizes[1:]))
        out["size-monotone"] = monotone
    if kind == "sparse":
        out["sparse-verified"] = all(r.extra.get("verified", False) for r in records)
        out["sparse-children-constant"] = all(r.extra.get("children_constant", False) for r in records)
    return out


def assemble_report(
    kind: str,
    config: ExperimentConfig,
    records: List[ReportRecord],
    refined: Optional[List[ReportRecord]],
    preflight_results: Sequence[InvariantResult],
) -> Report:
    """Single-writer merge of the ordered base and refined records."""
    notes: List[str] = []
    unbounded = any(r.extra.get("unbounded") for r in records)
    if refined is not None:
        if len(refined) != len(records):
            raise RuntimeError(f"refined run produced {len(refined)} records, base run {len(records)}")
        unbounded = unbounded or any(r.extra.get("unbounded") for r in refined)
        records = [r.model_copy(update={"refined_ratio": s.ratio}) for r, s in zip(records, refined)]
    if unbounded:
        notes.append("some record has a vanishing right side with a nonzero left side")

    max_ratio = _max_ratio(records, "ratio")
    refined_max = _max_ratio(records, "refined_ratio")
    growth, stable = None, None
    if refined is not None:
        if max_ratio and refined_max is not None:
            growth = refined_max / max_ratio - 1.0
            stable = growth <= config.tolerance and not unbounded
        else:
            notes.append("no finite ratio to compare across resolutions")

    invariants = {r.name: r.passed for r in preflight_results}
    invariants.update(experiment_invariants(kind, records, config))
    return Report(
        kind=kind,
        seed=config.seed,
        config_digest=inputs_digest([config]),
        environment_digest=environment_digest(),
        records=records,
        max_ratio=max_ratio,
        refined_max_ratio=refined_max,
        growth=growth,
        stable=stable,
        invariants=invariants,
        notes=notes,
    )


# --- Main Service Orchestrator ---

async def _run_resolution(kind: str, config: ExperimentConfig, spec: GridSpec) -> List[ReportRecord]:
    """Context and corpus side by side, then every fixture in parallel; results keep fixture order."""
    ctx, corpus = await asyncio.gather(
        asyncio.to_thread(build_context, kind, config, spec),
        asyncio.to_thread(generate_corpus, config.corpus, config.seed, spec),
    )
    runner = RUNNERS[kind]
    batches = await asyncio.gather(*(asyncio.to_thread(runner, ctx, index, f) for index, f in enumerate(corpus)))
    return [record for batch in batches for record in batch]


async def run_experiment(kind: Optional[str], config: ExperimentConfig) -> Report:
    """Orchestrates the full experiment pipeline."""

    # 1. Resolve the kind
    kind = kind or config.kind
    if kind not in EXPERIMENT_KINDS:
        raise ConfigurationError(f"unknown experiment kind '{kind}', expected one of {EXPERIMENT_KINDS}")
    config = config.model_copy(update={"kind": kind})
    logger.info(f"Running '{kind}' on grid {config.grid.levels} with seed {config.seed}.")

    # 2. Preflight gate (CPU-bound, off the event loop)
    preflight_results = await asyncio.to_thread(preflight, kind)

    # 3. Base resolution
    records = await _run_resolution(kind, config, config.grid)

    # 4. Doubled resolution for the stability verdict
    refined = None
    if config.refine:
        refined = await _run_resolution(kind, config, config.grid.refined())

    # 5. Construct the final report
    report = assemble_report(kind, config, records, refined, preflight_results)
    logger.info(
        f"Experiment '{kind}' finished: {len(report.records)} record(s), max ratio {report.max_ratio}, "
        f"growth {report.growth}, stable={report.stable}."
    )
    return report
