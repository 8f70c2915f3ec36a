import numpy as np
import pytest

from app.filters import build_filterbank, build_tensor_bank, remove_factor_means
from app.grid import Collection, DyadicCube, GridFunction, sample_points
from app.models import GridSpec
from app.square_functions import (
    discrete_square_function,
    inductive_square_function,
    localized_square_function,
    partial_square_function,
    square_function,
    tensor_square_function,
)


@pytest.fixture
def mean_free_square(rng, square):
    """Random 2-D function with every factor mean removed."""
    f = GridFunction(square, rng.normal(size=square.shape))
    return remove_factor_means(f, [[0], [1]])


# --- Continuous square functions ---

def test_single_band_function(line):
    """A pure frequency 2^k sits in one band, so Sf = |f|."""
    (x,) = sample_points(line)
    f = GridFunction(line, np.cos(2 * np.pi * 8 * x))
    sf = square_function(f, build_filterbank(line))
    np.testing.assert_allclose(sf.values, np.abs(f.values), atol=1e-12)


def test_sharp_annulus_plancherel(mean_zero_line):
    """Indicator bands are orthogonal projections: ||Sf||_2 = ||f||_2."""
    bank = build_filterbank(mean_zero_line.spec, profile="sharp-annulus")
    sf = square_function(mean_zero_line, bank)
    assert np.sum(sf.values ** 2) == pytest.approx(np.sum(mean_zero_line.values ** 2), rel=1e-12)


def test_tensor_single_band_product(square):
    """Products of pure dyadic frequencies give Sf = |f| for the two-parameter function."""
    x, y = sample_points(square)
    f = GridFunction(square, np.cos(2 * np.pi * 4 * x) * np.sin(2 * np.pi * 2 * y))
    sf = tensor_square_function(f, build_tensor_bank(square))
    np.testing.assert_allclose(sf.values, np.abs(f.values), atol=1e-12)


def test_induction_identity(mean_free_square):
    """Direct tensor and band-by-band inductive evaluation agree pointwise."""
    tbank = build_tensor_bank(mean_free_square.spec)
    direct = tensor_square_function(mean_free_square, tbank).values
    inductive = inductive_square_function(mean_free_square, tbank).values
    assert np.max(np.abs(direct - inductive)) <= 1e-10 * np.max(direct)


def test_partial_of_all_factors_is_tensor(mean_free_square):
    """Selecting every factor gives the full tensor square function."""
    tbank = build_tensor_bank(mean_free_square.spec)
    full = tensor_square_function(mean_free_square, tbank).values
    partial = partial_square_function(mean_free_square, tbank, [0, 1]).values
    np.testing.assert_allclose(partial, full, rtol=1e-12, atol=1e-14)


def test_partial_needs_factors(mean_free_square):
    """An empty or out-of-range selection is rejected."""
    tbank = build_tensor_bank(mean_free_square.spec)
    with pytest.raises(ValueError):
        partial_square_function(mean_free_square, tbank, [])
    with pytest.raises(ValueError):
        partial_square_function(mean_free_square, tbank, [2])


def test_vector_square_function_is_per_index(rng, line):
    """Vector data is treated one index at a time."""
    values = rng.normal(size=line.shape + (2,))
    values -= values.mean(axis=0)
    f = GridFunction(line, values, (2,))
    bank = build_filterbank(line)
    sf = square_function(f, bank)
    for j in range(2):
        np.testing.assert_allclose(sf.values[:, j], square_function(f.component((j,)), bank).values, atol=1e-12)


# --- Discrete square functions ---

def test_discrete_single_coefficient():
    """One coefficient a on I gives |a| / |I|^{1/2} on I and zero elsewhere."""
    spec = GridSpec(levels=(3,))
    I = DyadicCube(1, (0,))
    sf = discrete_square_function({I: 3.0}, Collection.full(1, 2), spec)
    np.testing.assert_allclose(sf.values[:4], 3.0 / np.sqrt(0.5))
    np.testing.assert_array_equal(sf.values[4:], 0.0)


def test_discrete_rejects_foreign_cubes():
    """Coefficients must be indexed by the collection."""
    with pytest.raises(ValueError):
        discrete_square_function({DyadicCube(3, (0,)): 1.0}, Collection.full(1, 2), GridSpec(levels=(4,)))


def test_discrete_vector_coefficients():
    """Vector coefficients keep their index shape."""
    spec = GridSpec(levels=(3, 3))
    coeffs = {DyadicCube(0, (0, 0)): np.array([1.0, 2.0])}
    sf = discrete_square_function(coeffs, Collection.full(2, 1), spec)
    assert sf.function.vector_shape == (2,)
    np.testing.assert_allclose(sf.values[..., 1], 2.0)


def test_discrete_square_function_is_homogeneous(rng):
    """S(lambda a) = |lambda| S(a); scaling by a power of two is exact."""
    spec = GridSpec(levels=(5,))
    c = Collection.full(1, 4)
    coeffs = {cube: float(rng.normal()) for cube in c}
    base = discrete_square_function(coeffs, c, spec).values
    doubled = discrete_square_function({I: -2.0 * a for I, a in coeffs.items()}, c, spec).values
    np.testing.assert_array_equal(doubled, 2.0 * base)
    rotated = discrete_square_function({I: 0.7j * a for I, a in coeffs.items()}, c, spec).values
    np.testing.assert_allclose(rotated, 0.7 * base, rtol=1e-12)


def test_discrete_square_function_grows_with_the_collection(rng):
    """Dropping cubes from the collection never increases S pointwise."""
    spec = GridSpec(levels=(4, 4))
    c = Collection.full(2, 2)
    coeffs = {cube: float(rng.normal()) for cube in c}
    full = discrete_square_function(coeffs, c, spec).values
    for keep in (lambda I: I.scale != 1, lambda I: I.position[0] == 0, lambda I: I.scale == 0):
        sub = Collection.of([I for I in c if keep(I)])
        partial = discrete_square_function({I: coeffs[I] for I in sub}, sub, spec).values
        assert np.all(partial <= full * (1 + 1e-12))


def test_localized_square_function(rng):
    """Localizing to Q0 keeps the cubes inside Q0 only."""
    spec = GridSpec(levels=(4,))
    c = Collection.full(1, 3)
    coeffs = {cube: float(rng.normal()) for cube in c}
    Q0 = DyadicCube(1, (1,))
    local = localized_square_function(coeffs, c, Q0, spec)
    inside = {cube: value for cube, value in coeffs.items() if Q0.contains(cube)}
    expected = discrete_square_function(inside, Collection.of(inside), spec)
    np.testing.assert_allclose(local.values, expected.values, atol=1e-14)
    np.testing.assert_array_equal(local.values[:8], 0.0)
