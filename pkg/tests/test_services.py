import numpy as np
import pytest

from app import services
from app.exceptions import ConfigurationError, GridError, PreflightError
from app.filters import build_tensor_bank
from app.models import CorpusRecipe, ExperimentConfig, GridSpec, InvariantResult, ReportRecord, WeightRecipe
from app.report_service import emit_report
from app.services import (
    assemble_report,
    corpus_summary,
    density_set,
    generate_corpus,
    preflight,
    run_experiment,
    verify_invariants,
)
from app.square_functions import tensor_square_function


# --- Test Data ---
@pytest.fixture
def discrete_config():
    """One Haar family, two densities, no refinement."""
    return ExperimentConfig(
        grid=GridSpec(levels=(6, 6)),
        family_kinds=["haar"],
        family_depth=2,
        densities=[1.0, 0.25],
        p_values=[2.0],
        corpus=CorpusRecipe(name="bumps", count=1, max_frequency=4),
        refine=False,
    )


@pytest.fixture
def sparse_config():
    """Haar coefficients on a 128-point line down to scale 3."""
    return ExperimentConfig(
        grid=GridSpec(levels=(7,)),
        family_kinds=["haar"],
        family_depth=3,
        p_values=[1.0, 2.0],
        corpus=CorpusRecipe(name="bumps", count=1, max_frequency=8),
        refine=False,
    )


def record(ratio, **extra):
    lhs = 1.0 if ratio is None else ratio
    rhs = 0.0 if ratio is None else 1.0
    return ReportRecord(fixture=0, kind="main", lhs=lhs, rhs=rhs, ratio=ratio, extra=extra)


# --- Corpus ---

def test_corpus_is_deterministic():
    """Equal recipe and seed give equal fixtures."""
    recipe = CorpusRecipe(name="mixed", count=3, max_frequency=4)
    spec = GridSpec(levels=(5, 5))
    first = generate_corpus(recipe, 7, spec)
    second = generate_corpus(recipe, 7, spec)
    for f, g in zip(first, second):
        np.testing.assert_array_equal(f.values, g.values)
    assert corpus_summary(first) == corpus_summary(second)


def test_zero_recipe():
    """The zero recipe gives identically zero fixtures."""
    rows = corpus_summary(generate_corpus(CorpusRecipe(name="zero", count=2), 0, GridSpec(levels=(4, 4))))
    assert [row["sup"] for row in rows] == [0.0, 0.0]


def test_fixtures_have_zero_axis_means():
    """Every coefficient with a vanishing frequency coordinate is removed."""
    corpus = generate_corpus(CorpusRecipe(name="bumps", count=3, max_frequency=4), 1, GridSpec(levels=(5, 5)))
    assert all(row["max_axis_mean"] <= 1e-12 for row in corpus_summary(corpus))
    assert all(row["sup"] > 0 for row in corpus_summary(corpus))


def test_single_band_fixture_square_function():
    """Single-band fixtures live on one band per axis, so the tensor square function is |f|."""
    spec = GridSpec(levels=(6, 6))
    (f,) = generate_corpus(CorpusRecipe(name="single-band", count=1, max_frequency=8), 2, spec)
    sf = tensor_square_function(f, build_tensor_bank(spec))
    np.testing.assert_allclose(sf.values, np.abs(f.values), atol=1e-12 * np.max(np.abs(f.values)))


def test_fixture_is_the_same_function_on_a_finer_grid():
    """The refined fixture restricted to the coarse lattice is the coarse fixture."""
    recipe = CorpusRecipe(name="chirps", count=2, max_frequency=4, vector_shape=(2,))
    coarse = generate_corpus(recipe, 5, GridSpec(levels=(5, 5)))
    fine = generate_corpus(recipe, 5, GridSpec(levels=(6, 6)))
    for f, g in zip(coarse, fine):
        np.testing.assert_allclose(g.values[::2, ::2], f.values, atol=1e-12)


def test_corpus_over_budget():
    """Vector fixtures count every sample against the budget."""
    recipe = CorpusRecipe(name="bumps", count=1, vector_shape=(2,))
    with pytest.raises(GridError):
        generate_corpus(recipe, 0, GridSpec(levels=(10, 10)))


def test_corpus_frequency_beyond_grid():
    """max_frequency must stay below half the samples per axis."""
    with pytest.raises(GridError):
        generate_corpus(CorpusRecipe(name="bumps", count=1, max_frequency=8), 0, GridSpec(levels=(4,)))
    with pytest.raises(ConfigurationError):
        generate_corpus(CorpusRecipe(name="bumps", count=1, max_frequency=1), 0, GridSpec(levels=(4,)))


def test_density_set_is_a_slab():
    """The slab keeps the requested fraction of one axis."""
    mask = density_set(GridSpec(levels=(4, 4)), 0.25)
    assert mask.sum() == 4 * 16
    assert mask[:4].all() and not mask[4:].any()


# --- Preflight ---

def test_all_invariant_suites_pass():
    """Every shipped invariant holds."""
    results = verify_invariants()
    assert results
    assert all(r.passed for r in results), [r.name for r in results if not r.passed]


def test_unknown_invariant_suite():
    """Asking for a suite that does not exist is a usage error."""
    with pytest.raises(ValueError):
        verify_invariants(["fourier"])


def test_failed_invariant_aborts_preflight(monkeypatch):
    """A failing check turns into a PreflightError naming it."""
    def broken() -> str:
        raise AssertionError("deliberately broken")

    monkeypatch.setitem(services.INVARIANT_SUITES, "norms", [("norms.broken", broken)])
    with pytest.raises(PreflightError) as info:
        preflight("main")
    assert info.value.invariant == "norms.broken"


# --- Experiments ---

async def test_main_experiment(small_main_config):
    """Band-limited fixtures give identical ratios on the doubled grid."""
    report = await run_experiment("main", small_main_config)
    assert len(report.records) == 2
    assert all(r.ratio is not None and r.refined_ratio is not None for r in report.records)
    assert report.stable is True
    assert abs(report.growth) <= 1e-10
    assert all(report.invariants.values())
    assert "induction-identity" in report.invariants


async def test_main_experiment_is_reproducible(small_main_config, tmp_path):
    """Two runs of one config emit byte-identical files."""
    first = await run_experiment("main", small_main_config)
    second = await run_experiment("main", small_main_config)
    emit_report(first, str(tmp_path / "a"))
    emit_report(second, str(tmp_path / "b"))
    for name in ("records.jsonl", "summary.json", "records.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


async def test_discrete_experiment(discrete_config):
    """Sizes are one on the full torus and shrink with the density."""
    report = await run_experiment("discrete", discrete_config)
    assert len(report.records) == 2 * 2
    assert report.invariants["discrete-full-torus-size"]
    assert report.invariants["size-monotone"]
    assert report.stable is None
    full = [r for r in report.records if r.parameters["density"] == 1.0]
    assert all(r.extra["size"] == 1.0 for r in full)


async def test_discrete_experiment_mixes_families(discrete_config):
    """Every ordered analysis/synthesis pair of family kinds is swept."""
    config = discrete_config.model_copy(update={"family_kinds": ["haar", "smooth"]})
    report = await run_experiment("discrete", config)
    pairs = {(r.parameters["family"], r.parameters["synthesis"]) for r in report.records}
    assert pairs == {("haar", "haar"), ("haar", "smooth"), ("smooth", "haar"), ("smooth", "smooth")}
    assert len(report.records) == 4 * 2 * 2
    assert report.invariants["size-monotone"]
    assert all(r.ratio is not None and r.ratio > 0 for r in report.records)


async def test_sparse_experiment(sparse_config):
    """Every sparse family is verified and the local square functions are constant on children."""
    report = await run_experiment("sparse", sparse_config)
    assert report.invariants["sparse-verified"]
    assert report.invariants["sparse-children-constant"]
    assert report.invariants["decay-dominates-weight"]
    weights = {r.parameters["weight"] for r in report.records}
    assert weights == {"power(a=0)", "power(a=0.25)", "power(a=0.5)"}
    assert all(r.extra["q_w"] is not None for r in report.records if r.parameters["weight"] == "power(a=0)")


async def test_localization_needs_small_p(sparse_config):
    """Localization only runs for p <= 1."""
    config = sparse_config.model_copy(update={"p_values": [2.0]})
    with pytest.raises(ConfigurationError):
        await run_experiment("localization", config)


async def test_localization_experiment(sparse_config):
    """One record per anchor cube, weight and p."""
    config = sparse_config.model_copy(update={"p_values": [0.5, 2.0], "family_depth": 2})
    report = await run_experiment("localization", config)
    cubes = {r.parameters["cube"] for r in report.records}
    assert cubes == {"0 0", "1 0", "1 1"}
    assert {r.parameters["p"] for r in report.records} == {0.5}


async def test_unknown_kind(small_main_config):
    """Experiment kinds are a closed set."""
    with pytest.raises(ConfigurationError):
        await run_experiment("fourier", small_main_config)


async def test_product_weight_check_needs_two_axes(sparse_config):
    """The product-weight check is multi-parameter."""
    with pytest.raises(ConfigurationError):
        await run_experiment("kurtz-product", sparse_config)


async def test_weighted_experiment_on_the_line():
    """One-parameter only in 1-D, one record per weight and p."""
    config = ExperimentConfig(
        grid=GridSpec(levels=(8,)),
        p_values=[1.5, 2.0],
        corpus=CorpusRecipe(name="bumps", count=1, max_frequency=8),
        refine=False,
    )
    report = await run_experiment("weighted", config)
    assert len(report.records) == 3 * 2
    assert {r.parameters["variant"] for r in report.records} == {"one-parameter"}


async def test_weighted_experiment_with_product_weight():
    """In 2-D both square functions are compared under the product weight."""
    config = ExperimentConfig(
        grid=GridSpec(levels=(5, 5)),
        p_values=[2.0],
        weights=[WeightRecipe(kind="product", factor_exponents=[0.25, 0.5])],
        corpus=CorpusRecipe(name="bumps", count=1, max_frequency=4),
        refine=False,
    )
    report = await run_experiment("weighted", config)
    assert [r.parameters["variant"] for r in report.records] == ["one-parameter", "multi-parameter"]
    assert all(r.parameters["weight"] == "product(0.25,0.5)" for r in report.records)
    assert all(r.ratio > 0 for r in report.records)


async def test_failed_preflight_stops_the_run(monkeypatch, small_main_config):
    """No record is computed once an invariant fails."""
    def failing(kind):
        raise PreflightError("grid.nesting", "broken on purpose")

    monkeypatch.setattr(services, "preflight", failing)
    with pytest.raises(PreflightError):
        await run_experiment("main", small_main_config)


# --- Report assembly ---

def test_growth_between_resolutions():
    """growth = refined max / base max - 1, stable within the tolerance."""
    report = assemble_report("main", ExperimentConfig(), [record(1.0)], [record(1.05)], [])
    assert report.growth == pytest.approx(0.05)
    assert report.stable is True
    assert report.refined_max_ratio == 1.05


def test_unbounded_record_is_never_stable():
    """A vanishing right side with a nonzero left side blocks the stable verdict."""
    records = [record(1.0), record(None, unbounded=True)]
    report = assemble_report("main", ExperimentConfig(), records, [record(1.0), record(None, unbounded=True)], [])
    assert report.stable is False
    assert report.notes


def test_single_resolution_report():
    """Without a refined run there is no verdict."""
    passed = InvariantResult(name="grid.nesting", module="grid", passed=True, detail="ok")
    report = assemble_report("main", ExperimentConfig(), [record(2.0)], None, [passed])
    assert report.growth is None and report.stable is None
    assert report.max_ratio == 2.0
    assert report.invariants == {"grid.nesting": True}


def test_mismatched_refined_run():
    """The two resolutions must produce the same records."""
    with pytest.raises(RuntimeError):
        assemble_report("main", ExperimentConfig(), [record(1.0)], [], [])
