import numpy as np
import pytest

from app.decomposition import (
    NOISE_FLOOR,
    analyze,
    choose_sample_points,
    fj_pipeline_check,
    fj_reconstruct,
    search_shift,
    synthesize,
)
from app.filters import build_filterbank, build_lacunary_family
from app.grid import Collection, DyadicCube, GridFunction, sample_points
from app.models import GridSpec


@pytest.fixture
def smooth_signal():
    """Smooth mean-zero trigonometric polynomial on 256 samples."""
    spec = GridSpec(levels=(8,))
    (x,) = sample_points(spec)
    return GridFunction(spec, np.cos(2 * np.pi * 3 * x) + 0.5 * np.sin(2 * np.pi * 10 * x))


# --- Analysis and synthesis ---

def test_haar_analysis_synthesis_is_identity(mean_zero_line):
    """The L^2-normalized Haar system on every scale down to two cells is a basis of mean-zero functions."""
    fam = build_lacunary_family(mean_zero_line.spec, Collection.full(1, 6), 2.0, "haar")
    g = synthesize(analyze(mean_zero_line, fam), fam)
    np.testing.assert_allclose(g.values, mean_zero_line.values, atol=1e-10)


def test_analysis_matches_naive_inner_product(mean_zero_line):
    """FFT correlation equals the direct sum of f phi_I over the cells."""
    spec = mean_zero_line.spec
    fam = build_lacunary_family(spec, Collection.full(1, 3), 1.0, "smooth")
    coeffs = analyze(mean_zero_line, fam)
    for cube in (DyadicCube(0, (0,)), DyadicCube(2, (3,)), DyadicCube(3, (6,))):
        naive = float(np.sum(mean_zero_line.values * fam.function(cube))) * spec.cell_measure
        assert coeffs[cube] == pytest.approx(naive, abs=1e-12)


def test_vector_coefficients_keep_shape(rng, line):
    """Vector data yields one coefficient per vector index."""
    f = GridFunction(line, rng.normal(size=line.shape + (3,)), (3,))
    fam = build_lacunary_family(line, Collection.full(1, 2), 2.0, "haar")
    coeffs = analyze(f, fam)
    assert coeffs.vector_shape == (3,)
    assert all(np.shape(v) == (3,) for v in coeffs.values())
    assert synthesize(coeffs, fam).vector_shape == (3,)


def test_synthesis_rejects_foreign_cubes(line):
    """Every coefficient must be indexed by the synthesis family."""
    fam = build_lacunary_family(line, Collection.full(1, 2), 2.0, "haar")
    with pytest.raises(ValueError):
        synthesize({DyadicCube(3, (0,)): 1.0}, fam)


def test_coefficients_scale_linearly(mean_zero_line):
    """analyze is linear in f."""
    fam = build_lacunary_family(mean_zero_line.spec, Collection.full(1, 3), 2.0, "haar")
    coeffs = analyze(mean_zero_line, fam)
    doubled = analyze(mean_zero_line * 2.0, fam)
    for cube, value in coeffs.scaled(2.0).items():
        assert doubled[cube] == pytest.approx(value, abs=1e-12)


# --- Sample points and reconstruction ---

def test_sample_points_lie_in_their_cubes(smooth_signal):
    """x_I is a grid index inside I."""
    bank = build_filterbank(smooth_signal.spec)
    points = choose_sample_points(smooth_signal, bank, 2)
    spec = smooth_signal.spec
    for cube, index in points.items():
        (window,) = cube.slices(spec)
        assert window.start <= int(index) < window.stop


def test_sample_points_need_one_dimension(square):
    """Sample-point selection is one-dimensional."""
    bank = build_filterbank(square)
    with pytest.raises(ValueError):
        choose_sample_points(GridFunction.zeros(square), bank, 1)


def test_shift_search_then_reconstruct(smooth_signal):
    """With the searched N every residual step contracts by at most the measured ratio."""
    bank = build_filterbank(smooth_signal.spec)
    N, ratio = search_shift(smooth_signal, bank)
    assert ratio <= 0.5
    result = fj_reconstruct(smooth_signal, bank, N)
    assert result.ratio < 1.0
    assert result.ok
    assert len(result.residuals) == result.l_max
    for band in result.bands.values():
        chain = [band.reference] + band.residuals
        for before, after in zip(chain, chain[1:]):
            if before > NOISE_FLOOR * band.reference:
                assert after / before <= result.ratio


def test_eight_step_reconstruction_error(smooth_signal):
    """At l_max=8 with ratio <= 1/2 the sup error is within 2^-8 of the band scale."""
    bank = build_filterbank(smooth_signal.spec)
    N, ratio = search_shift(smooth_signal, bank, target=0.5, probe_iterations=8)
    result = fj_reconstruct(smooth_signal, bank, N, l_max=8)
    assert result.ratio == ratio <= 0.5
    assert result.ok
    scale = max(band.reference for band in result.bands.values())
    assert result.error <= (2.0 ** -8 + 1e-10) * scale
    assert result.tolerance <= (result.ratio ** 8 + 1e-10) * scale


def test_reconstruction_of_zero(smooth_signal):
    """f = 0 leaves nothing to rebuild and nothing to tolerate."""
    bank = build_filterbank(smooth_signal.spec)
    result = fj_reconstruct(GridFunction.zeros(smooth_signal.spec), bank, 2, x_pts=choose_sample_points(smooth_signal, bank, 2))
    assert result.residuals == [0.0] * result.l_max
    assert result.tolerance == 0.0 and result.ok


def test_reconstruction_needs_a_resolved_band(smooth_signal):
    """N larger than the grid leaves nothing to rebuild."""
    bank = build_filterbank(smooth_signal.spec)
    with pytest.raises(ValueError):
        fj_reconstruct(smooth_signal, bank, 20)


def test_majorization_chain(smooth_signal):
    """Sampled minima never exceed the bands, so the chain is ordered."""
    bank = build_filterbank(smooth_signal.spec)
    report = fj_pipeline_check(smooth_signal, bank, 2)
    assert report.pointwise_ok
    assert report.sampled_norm <= report.shifted_norm * (1 + 1e-12)
    assert report.shifted_norm <= report.square_norm * (1 + 1e-12)
