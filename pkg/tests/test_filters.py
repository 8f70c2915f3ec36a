import numpy as np
import pytest

from app.exceptions import ConfigurationError, ResolutionError
from app.filters import (
    PROFILES,
    band_convolve,
    build_filterbank,
    build_lacunary_family,
    build_tensor_bank,
    export_profiles_csv,
    iter_bands,
    remove_factor_means,
    reproducing_profile,
    spatial_split,
)
from app.grid import Collection, DyadicCube, GridFunction
from app.models import GridSpec


# --- Filter banks ---

@pytest.mark.parametrize("profile", PROFILES)
@pytest.mark.parametrize("levels", [(8,), (5, 5)])
def test_partition_of_unity(profile, levels):
    """The profiles sum to one at every nonzero lattice frequency."""
    bank = build_filterbank(GridSpec(levels=levels), profile=profile)
    assert bank.partition_error() <= 1e-12


def test_scale_range_beyond_nyquist():
    """A top scale above the representable band is a configuration error."""
    with pytest.raises(ConfigurationError):
        build_filterbank(GridSpec(levels=(8,)), k_range=(0, 9))


def test_unknown_profile():
    """Only the two shipped profiles exist."""
    with pytest.raises(ConfigurationError):
        build_filterbank(GridSpec(levels=(6,)), profile="gaussian")


def test_bands_reproduce_mean_zero_function(mean_zero_line):
    """sum_k f * psi_k gives back a mean-zero f."""
    bank = build_filterbank(mean_zero_line.spec)
    total = sum(band_convolve(mean_zero_line, bank, k).values for k in bank.scales)
    peak = np.max(np.abs(mean_zero_line.values))
    assert np.max(np.abs(total - mean_zero_line.values)) <= 1e-10 * peak


def test_reproducing_profile_is_one_on_support():
    """psi-hat_{k-1} + psi-hat_k + psi-hat_{k+1} equals one wherever psi-hat_k lives."""
    bank = build_filterbank(GridSpec(levels=(8,)))
    for k in range(1, bank.k_max):
        support = bank.psi_hat(k) > 0
        np.testing.assert_allclose(reproducing_profile(bank, k)[support], 1.0, atol=1e-12)


def test_profiles_export_csv(tmp_path):
    """CSV export has one row per lattice frequency plus the header."""
    bank = build_filterbank(GridSpec(levels=(4,)))
    path = tmp_path / "profiles.csv"
    export_profiles_csv(bank, str(path))
    rows = path.read_text().splitlines()
    assert rows[0].startswith("xi_0,psi_hat_0")
    assert len(rows) == 1 + 16


def test_tensor_bank_factor_dims_must_cover_axes():
    """Factor dimensions must sum to d."""
    with pytest.raises(ConfigurationError):
        build_tensor_bank(GridSpec(levels=(4, 4)), factor_dims=[1])


def test_tensor_multiplier_is_product(square):
    """The tensor multiplier is the outer product of the factor profiles."""
    tbank = build_tensor_bank(square)
    first, second = tbank.factors
    expected = np.multiply.outer(first.psi_hat(2), second.psi_hat(3))
    np.testing.assert_array_equal(tbank.multiplier((2, 3)), expected)


def test_remove_factor_means_zeroes_axis_means(rng, square):
    """After removal every line average along either axis vanishes."""
    f = GridFunction(square, rng.normal(size=square.shape) + 1.0)
    g = remove_factor_means(f, [[0], [1]])
    assert np.max(np.abs(g.values.mean(axis=0))) <= 1e-12
    assert np.max(np.abs(g.values.mean(axis=1))) <= 1e-12


def test_band_convolve_matches_direct_circular_convolution(rng):
    """On 64 samples the FFT band equals the O(n^2) circular sum against the band kernel."""
    spec = GridSpec(levels=(6,))
    bank = build_filterbank(spec)
    f = GridFunction(spec, rng.normal(size=spec.shape))
    n = spec.shape[0]
    index = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    peak = np.max(np.abs(f.values))
    for k in bank.scales:
        kernel = np.fft.ifft(bank.psi_hat(k))
        direct = kernel[index] @ f.values
        assert np.max(np.abs(band_convolve(f, bank, k).values - direct)) <= 1e-10 * peak


def test_factor_convolutions_compose_to_tensor_band(rng, square):
    """Convolving along each factor in turn is convolution with the tensor Psi_k."""
    tbank = build_tensor_bank(square)
    first, second = tbank.factors
    f = GridFunction(square, rng.normal(size=square.shape))
    for ks in [(1, 1), (2, 3), (4, 0)]:
        sequential = band_convolve(band_convolve(f, first, ks[0]), second, ks[1]).values
        np.testing.assert_allclose(sequential, band_convolve(f, tbank, ks).values, atol=1e-12 * np.max(np.abs(f.values)))


def test_iter_bands_matches_band_convolve(rng, square):
    """The single-FFT band iterator yields the same bands as one convolution per scale."""
    tbank = build_tensor_bank(square)
    f = GridFunction(square, rng.normal(size=square.shape))
    bands = dict(iter_bands(f, tbank))
    assert len(bands) == len(tbank.factors[0].scales) * len(tbank.factors[1].scales)
    np.testing.assert_allclose(bands[(2, 3)], band_convolve(f, tbank, (2, 3)).values, atol=1e-12)


# --- Lacunary families ---

@pytest.mark.parametrize("kind", ["haar", "smooth"])
def test_family_is_mean_zero_and_normalized(kind):
    """Profiles are mean zero and have unit L^p norm."""
    spec = GridSpec(levels=(7,))
    p = 1.5
    fam = build_lacunary_family(spec, Collection.full(1, 3), p, kind)
    assert max(fam.mean_errors().values()) <= 1e-12
    for cube in (DyadicCube(1, (1,)), DyadicCube(3, (5,))):
        phi = fam.function(cube)
        norm = float(np.sum(np.abs(phi) ** p) * spec.cell_measure) ** (1.0 / p)
        assert norm == pytest.approx(1.0, rel=1e-12)


def test_family_translates_with_the_cube():
    """phi_I for a shifted cube is the shifted profile."""
    spec = GridSpec(levels=(6,))
    fam = build_lacunary_family(spec, Collection.full(1, 2), 2.0, "haar")
    np.testing.assert_array_equal(fam.function(DyadicCube(2, (1,))), np.roll(fam.function(DyadicCube(2, (0,))), 16))


def test_smooth_family_below_resolution():
    """Smooth profiles need MIN_SMOOTH_CELLS cells per axis and every offending cube is named."""
    with pytest.raises(ResolutionError) as info:
        build_lacunary_family(GridSpec(levels=(6,)), Collection.full(1, 4), 2.0, "smooth")
    assert len(info.value.cubes) == 16


def test_smooth_family_records_derivative_constants():
    """1-D smooth families carry finite derivative bounds up to the smoothness order."""
    fam = build_lacunary_family(GridSpec(levels=(7,)), Collection.full(1, 2), 2.0, "smooth", smoothness=4)
    assert sorted(fam.derivative_constants) == [0, 1, 2, 3, 4]
    assert all(np.isfinite(v) and v > 0 for v in fam.derivative_constants.values())
    assert np.isfinite(fam.decay_constant)


def test_unknown_family_kind():
    """Only Haar and smooth families exist."""
    with pytest.raises(ConfigurationError):
        build_lacunary_family(GridSpec(levels=(6,)), Collection.full(1, 2), 2.0, "meyer")


def test_spatial_split_rebuilds_profile():
    """Once the rings cover the torus the rescaled pieces sum back to phi_I."""
    spec = GridSpec(levels=(6,))
    fam = build_lacunary_family(spec, Collection.full(1, 2), 2.0, "smooth")
    split = spatial_split(fam, M=1.0, ell_max=3)
    assert split.residual == 0.0
    assert split.tolerance_met
    for cube in (DyadicCube(1, (1,)), DyadicCube(2, (3,))):
        phi = fam.function(cube)
        np.testing.assert_allclose(split.reconstruct(cube), phi, atol=1e-12 * np.max(np.abs(phi)))


def test_spatial_split_rings_stay_in_dilates():
    """Ring l of phi_I vanishes outside 2^l I, the dilate about the centre of I."""
    spec = GridSpec(levels=(7,))
    fam = build_lacunary_family(spec, Collection.full(1, 3), 2.0, "smooth")
    split = spatial_split(fam, M=2.0, ell_max=2)
    n = spec.shape[0]
    for cube in (DyadicCube(1, (0,)), DyadicCube(2, (3,)), DyadicCube(3, (6,))):
        (m,) = cube.cells_per_axis(spec)
        centre = cube.position[0] * m + m // 2
        distance = np.abs((np.arange(n) - centre + n // 2) % n - n // 2)
        for ell, ring in enumerate(split.families):
            piece = ring.function(cube)
            assert np.all(distance[piece != 0] <= (m << ell) // 2)


def test_spatial_split_of_haar_is_trivial():
    """Haar profiles are already compactly supported."""
    fam = build_lacunary_family(GridSpec(levels=(6,)), Collection.full(1, 2), 2.0, "haar")
    split = spatial_split(fam, M=1.0, ell_max=4)
    assert split.families == [fam] and split.ell_max == 0
