import json

import numpy as np
import pytest

from app.exceptions import MajorSubsetError, SparseInvariantError
from app.filters import build_filterbank, build_lacunary_family
from app.grid import Collection, DyadicCube
from app.models import GridSpec
from app.norms import local_sf_average, lp_norm
from app.square_functions import discrete_square_function, square_function
from app.stopping import (
    ExceptionalSets,
    SparseFamily,
    build_exceptional_sets,
    counting_ratios,
    intersect_decompositions,
    interpolation_split,
    localization_sides,
    major_subset,
    sparse_bound_rhs,
    sparse_construct,
    stopping_time,
)
from app.weights import make_weight


@pytest.fixture
def tree():
    """Random coefficients on every dyadic interval down to scale 4, on a 64-point line."""
    spec = GridSpec(levels=(6,))
    c = Collection.full(1, 4)
    rng = np.random.default_rng(11)
    coeffs = {cube: float(rng.normal()) for cube in c}
    return spec, c, coeffs


@pytest.fixture
def unit_weight():
    spec = GridSpec(levels=(6,))
    return make_weight("custom", spec, samples=np.ones(spec.shape))


# --- Exceptional sets ---

def test_exceptional_sets_meet_budget(mean_zero_line):
    """C doubles until |Omega| drops below the budget, and every level obeys Chebyshev."""
    sf = square_function(mean_zero_line, build_filterbank(mean_zero_line.spec))
    exc = build_exceptional_sets(sf, p=2.0)
    assert exc.measure < exc.budget
    assert all(ratio <= 1 + 1e-12 for ratio in exc.chebyshev_ratios().values())


def test_major_subset_keeps_at_least_half(line):
    """Removing an empty Omega keeps F, a full Omega is refused."""
    F = np.ones(line.shape, dtype=bool)
    empty = ExceptionalSets(line, 1.0, 2.0, 1.0, {}, {}, np.zeros(line.shape, dtype=bool), 0.1)
    np.testing.assert_array_equal(major_subset(F, empty), F)
    full = ExceptionalSets(line, 1.0, 2.0, 1.0, {}, {}, np.ones(line.shape, dtype=bool), 0.1)
    with pytest.raises(MajorSubsetError):
        major_subset(F, full)


# --- Stopping times ---

def test_stopping_time_assigns_each_cube_once(tree):
    """Every cube of c sits under exactly one head that contains it."""
    spec, c, coeffs = tree
    decomposition = stopping_time(coeffs, c, "sf-average", 1.0, 2.0, spec)
    assignment = decomposition.assignment()
    assert set(assignment) == set(c.cubes)
    members = [cube for level in decomposition.levels for group in level.members.values() for cube in group]
    assert len(members) == len(c)
    assert all(head.contains(cube) for cube, (_, head) in assignment.items())


def test_stopping_heads_are_counted(tree):
    """sum |heads| (ref/2^n)^p never exceeds ||S||_p^p at a level."""
    spec, c, coeffs = tree
    reference = max(local_sf_average(coeffs, c, I, 2.0, spec) for I in c)
    decomposition = stopping_time(coeffs, c, "sf-average", reference, 2.0, spec)
    norm = lp_norm(discrete_square_function(coeffs, c, spec).function, spec, 2.0)
    assert all(ratio <= 1 + 1e-12 for ratio in counting_ratios(decomposition, norm, 2.0).values())


def test_equal_averages_stop_at_the_first_level():
    """When every local average equals the reference each maximal cube is a head at n=1."""
    spec = GridSpec(levels=(4,))
    left, right = DyadicCube(1, (0,)), DyadicCube(1, (1,))
    coeffs = {left: 0.0, right: float(np.sqrt(0.5)), DyadicCube(2, (0,)): 0.5, DyadicCube(2, (1,)): 0.5}
    c = Collection.of(coeffs)
    for I in c:
        assert local_sf_average(coeffs, c, I, 2.0, spec) == pytest.approx(1.0)
    decomposition = stopping_time(coeffs, c, "sf-average", 1.0, 2.0, spec)
    assert len(decomposition.levels) == 1
    (level,) = decomposition.levels
    assert level.n == 1
    assert level.heads == c.maximal() == [left, right]
    assert level.members[left] == [left, DyadicCube(2, (0,)), DyadicCube(2, (1,))]


def test_empty_collection_has_no_levels():
    spec = GridSpec(levels=(4,))
    assert stopping_time({}, Collection.of([]), "sf-average", 1.0, 2.0, spec).levels == []


def test_size_stopping_needs_the_set(tree):
    """The size direction reads averages of 1_E."""
    spec, c, coeffs = tree
    with pytest.raises(ValueError):
        stopping_time(coeffs, c, "size-average", 1.0, 2.0, spec)
    with pytest.raises(ValueError):
        stopping_time(coeffs, c, "mass", 1.0, 2.0, spec)


def test_intersected_decompositions_are_exhaustive(tree):
    """Buckets of two decompositions cover c and sit under both heads."""
    spec, c, coeffs = tree
    E = np.zeros(spec.shape, dtype=bool)
    E[10:30] = True
    d1 = stopping_time(coeffs, c, "sf-average", 1.0, 2.0, spec)
    d2 = stopping_time(coeffs, c, "size-average", 1.0, 2.0, spec, E=E, decay=4.0)
    buckets = intersect_decompositions(d1, d2, c)
    assert buckets.exhaustive and buckets.nested
    assert sum(len(v) for v in buckets.buckets.values()) == len(c)
    assert len(json.loads(d2.to_json())["levels"]) == len(d2.levels)


# --- Sparse families ---

def test_sparse_family_is_verified(tree, unit_weight):
    """Each E_Q keeps half of Q and the local collections partition c."""
    spec, c, coeffs = tree
    family = sparse_construct(coeffs, c, unit_weight, 2.0, spec=spec)
    assert family.verified
    assert family.generations[0] == c.maximal()
    for Q in family.cubes:
        assert 2 * family.e_measure(Q) >= Q.measure
    assigned = [I for group in family.partition.values() for I in group]
    assert sorted(assigned) == sorted(c.cubes)


def test_sparse_bound_needs_a_verified_family(tree, unit_weight):
    """An unverified family is refused before any sum is taken."""
    spec, c, coeffs = tree
    unverified = SparseFamily(spec, [c.maximal()], {}, {}, {})
    with pytest.raises(SparseInvariantError):
        sparse_bound_rhs(coeffs, c, unverified, unit_weight, 2.0, 2.0)


def test_sparse_bound_variants(tree, unit_weight):
    """Both right-hand sides are positive; unknown variants and negative eps are rejected."""
    spec, c, coeffs = tree
    family = sparse_construct(coeffs, c, unit_weight, 2.0, spec=spec)
    assert sparse_bound_rhs(coeffs, c, family, unit_weight, 2.0, 2.0) > 0
    assert sparse_bound_rhs(coeffs, c, family, unit_weight, 2.0, 2.0, variant="mass") > 0
    with pytest.raises(ValueError):
        sparse_bound_rhs(coeffs, c, family, unit_weight, 2.0, 2.0, variant="median")
    with pytest.raises(ValueError):
        sparse_bound_rhs(coeffs, c, family, unit_weight, 2.0, 2.0, eps_p=-0.5)


def test_interpolation_split_partitions_collection(tree):
    """The two halves are disjoint and together give c."""
    spec, c, coeffs = tree
    sf = discrete_square_function(coeffs, c, spec)
    inside, rest = interpolation_split(sf, c, float(np.median(sf.values)))
    assert not inside.cubes & rest.cubes
    assert set(inside.cubes) | set(rest.cubes) == set(c.cubes)
    with pytest.raises(ValueError):
        interpolation_split(sf, c, 0.0)


# --- Localization ---

def test_localization_without_local_coefficients(tree, unit_weight):
    """No coefficient inside I0 gives an empty left side."""
    spec, c, _ = tree
    fam2 = build_lacunary_family(spec, c, 2.0, "haar")
    sides = localization_sides({DyadicCube(1, (1,)): 1.0}, c, DyadicCube(1, (0,)), unit_weight, 2.0, 2.0, fam2)
    assert sides.lhs == 0.0
    assert sides.ratio is None


def test_localization_sides_are_positive(tree, unit_weight):
    """Both sides are finite and positive for generic coefficients."""
    spec, c, coeffs = tree
    fam2 = build_lacunary_family(spec, c, 2.0, "haar")
    sides = localization_sides(coeffs, c, DyadicCube(1, (0,)), unit_weight, 2.0, 2.0, fam2)
    assert sides.lhs > 0 and sides.rhs > 0
    assert np.isfinite(sides.ratio)


def test_localization_vector_needs_q(tree, unit_weight):
    """Vector coefficients need the inner exponents."""
    spec, c, _ = tree
    fam2 = build_lacunary_family(spec, c, 2.0, "haar")
    coeffs = {DyadicCube(2, (0,)): np.array([1.0, -1.0])}
    with pytest.raises(ValueError):
        localization_sides(coeffs, c, DyadicCube(1, (0,)), unit_weight, 2.0, 2.0, fam2)
