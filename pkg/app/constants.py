EXPERIMENT_KINDS = ("main", "discrete", "localization", "sparse", "weighted", "kurtz-product")

CORPUS_RECIPES = ("zero", "single-band", "bumps", "chirps", "wavelets", "mixed")

# Components drawn by the "mixed" recipe.
MIXED_COMPONENTS = ("bumps", "chirps", "wavelets")

# P/Q sweep; sub-Banach entries included.
DEFAULT_OUTER_EXPONENTS = (0.5, 0.75, 1.0, 2.0, 3.0)
DEFAULT_INNER_EXPONENTS = (0.7, 2.0)
DEFAULT_MIXED_PAIRS = ((0.5, 3.0), (3.0, 0.5))

# Inner exponent used by the scalar-p experiments on vector-valued fixtures.
WEIGHTED_INNER_EXPONENT = 2.0

DEFAULT_WEIGHT_POWERS = (0.0, 0.25, 0.5)
DEFAULT_PRODUCT_POWERS = ((0.0, 0.0), (0.25, 0.5))

# Density sets E are slabs along this axis.
DENSITY_SLAB_AXIS = 0

# Invariant suites each experiment kind depends on.
KIND_MODULES = {
    "main": ["grid", "filters", "square_functions", "norms"],
    "discrete": ["grid", "filters", "square_functions", "norms", "decomposition"],
    "localization": ["grid", "filters", "square_functions", "norms", "decomposition", "weights"],
    "sparse": ["grid", "filters", "square_functions", "norms", "decomposition", "stopping", "weights"],
    "weighted": ["grid", "filters", "square_functions", "norms", "weights"],
    "kurtz-product": ["grid", "filters", "square_functions", "norms", "weights"],
}

REPORT_FILES = {
    "records": "records.jsonl",
    "summary": "summary.json",
    "csv": "records.csv",
    "manifest": "manifest.json",
}

CSV_COLUMNS = ["fixture", "kind", "parameters", "lhs", "rhs", "ratio", "refined_ratio", "extra"]
