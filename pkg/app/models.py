import math
from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import List, Dict, Optional, Any, Literal, Tuple

from .config import settings

ExperimentKind = Literal["main", "discrete", "localization", "sparse", "weighted", "kurtz-product"]
CorpusName = Literal["zero", "single-band", "bumps", "chirps", "wavelets", "mixed"]


def _check_exponents(values, name: str):
    for v in values:
        if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
            raise ValueError(f"{name} exponents must be finite and strictly positive, got {v!r}")


# --- Geometry and norm specifications ---

class GridSpec(BaseModel):
    """Periodic grid on [0,1)^d with 2^{L_j} samples on axis j."""
    model_config = ConfigDict(frozen=True)

    levels: Tuple[int, ...] = Field(..., description="Per-axis log2 resolution L_j.", examples=[[8, 8]])
    groups: Tuple[int, ...] = Field((), description="Axis grouping (n_1,...,n_M) into blocks; defaults to one block.", examples=[[1, 1]])

    @model_validator(mode="before")
    @classmethod
    def _default_groups(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("groups"):
            data = dict(data)
            data["groups"] = (len(data.get("levels") or ()),)
        return data

    @model_validator(mode="after")
    def _check(self) -> "GridSpec":
        if not self.levels:
            raise ValueError("GridSpec needs at least one axis")
        if any(level < 2 for level in self.levels):
            raise ValueError(f"every axis needs L_j >= 2, got {self.levels}")
        if any(g <= 0 for g in self.groups) or sum(self.groups) != len(self.levels):
            raise ValueError(f"axis grouping {self.groups} does not partition {len(self.levels)} axes")
        if self.size > settings.GRID_SAMPLE_BUDGET:
            raise ValueError(f"grid of {self.size} samples exceeds the budget of {settings.GRID_SAMPLE_BUDGET}")
        return self

    @classmethod
    def cube(cls, d: int, level: int, groups: Optional[Tuple[int, ...]] = None) -> "GridSpec":
        return cls(levels=(level,) * d, groups=groups or ())

    @property
    def dimension(self) -> int:
        return len(self.levels)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(1 << level for level in self.levels)

    @property
    def size(self) -> int:
        return 1 << sum(self.levels)

    @property
    def cell_measure(self) -> float:
        return 2.0 ** (-sum(self.levels))

    @property
    def max_scale(self) -> int:
        """Finest dyadic scale whose cubes are unions of cells on every axis."""
        return min(self.levels)

    def refined(self, steps: int = 1) -> "GridSpec":
        return GridSpec(levels=tuple(level + steps for level in self.levels), groups=self.groups)

    def coarsened(self, steps: int = 1) -> "GridSpec":
        return GridSpec(levels=tuple(level - steps for level in self.levels), groups=self.groups)


class MixedNormSpec(BaseModel):
    """Exponent tuples for the iterated quasi-norm L^P(L^Q)."""
    model_config = ConfigDict(frozen=True)

    p: Tuple[float, ...] = Field(..., description="Spatial exponents, outermost first.", examples=[[0.5, 3.0]])
    q: Tuple[float, ...] = Field((), description="Vector-index exponents, outermost first.", examples=[[0.7]])
    groups: Tuple[int, ...] = Field((), description="Optional block grouping of the spatial axes.")

    @model_validator(mode="after")
    def _check(self) -> "MixedNormSpec":
        if not self.p:
            raise ValueError("P must have at least one exponent")
        _check_exponents(self.p, "P")
        _check_exponents(self.q, "Q")
        if self.groups:
            if sum(self.groups) != len(self.p):
                raise ValueError(f"grouping {self.groups} does not match {len(self.p)} spatial exponents")
            start = 0
            for size in self.groups:
                block = self.p[start:start + size]
                if len(set(block)) != 1:
                    raise ValueError(f"exponents inside a block must agree, got {block}")
                start += size
        return self

    @classmethod
    def scalar(cls, p: float, d: int = 1) -> "MixedNormSpec":
        return cls(p=(p,) * d)

    def check_shapes(self, grid: GridSpec, vector_shape: Tuple[int, ...]):
        if len(self.p) != grid.dimension:
            raise ValueError(f"P has {len(self.p)} entries but the grid has {grid.dimension} axes")
        if len(self.q) != len(vector_shape):
            raise ValueError(f"Q has {len(self.q)} entries but the vector shape is {vector_shape}")
        if self.groups and grid.groups and tuple(self.groups) != tuple(grid.groups):
            raise ValueError(f"norm grouping {self.groups} inconsistent with grid grouping {grid.groups}")

    @property
    def label(self) -> str:
        p = ",".join(f"{v:g}" for v in self.p)
        q = ",".join(f"{v:g}" for v in self.q)
        return f"P=({p}) Q=({q})"


# --- Experiment configuration ---

class CorpusRecipe(BaseModel):
    """Seeded recipe for a corpus of band-limited test functions."""
    name: CorpusName = Field("mixed", description="Recipe name.", examples=["bumps"])
    count: int = Field(8, ge=0, description="Number of fixtures.")
    vector_shape: Tuple[int, ...] = Field((), description="Vector index shape (|S_1|,...,|S_n|).", examples=[[2]])
    max_frequency: int = Field(16, ge=1, description="Largest |xi_j| carried by a fixture; fixes the function across resolutions.")
    components: int = Field(4, ge=1, description="Bumps/chirps/atoms per fixture.")


class CorpusRequest(BaseModel):
    """Body of the corpus endpoint."""
    recipe: CorpusRecipe = Field(default_factory=CorpusRecipe)
    grid: GridSpec = Field(default_factory=lambda: GridSpec(levels=(7, 7)))
    seed: int = Field(0, ge=0)


class WeightRecipe(BaseModel):
    """Recipe for a weight on the experiment grid."""
    kind: Literal["power", "product", "custom", "spikes"] = Field("power", examples=["power"])
    exponent: float = Field(0.0, description="Power a in |x - c|^a.")
    factor_exponents: List[float] = Field(default_factory=list, description="Per-axis powers for product weights.")
    samples: Optional[List[float]] = Field(None, description="Flattened samples for custom weights.")
    sharpness: float = Field(1.0, gt=0, description="Spike sharpness s in exp(-s/dist).")


class ExperimentConfig(BaseModel):
    """A single JSON document describing one experiment run."""
    kind: Optional[ExperimentKind] = Field(None, description="Experiment kind; the CLI flag overrides it.")
    grid: GridSpec = Field(default_factory=lambda: GridSpec(levels=(7, 7)))
    norms: List[MixedNormSpec] = Field(default_factory=list, description="P/Q sweep; empty selects the default sweep.")
    factor_dims: List[int] = Field(default_factory=list, description="Tensor bank factor dimensions; empty means one factor per axis.")
    family_kinds: List[Literal["haar", "smooth"]] = Field(default_factory=lambda: ["haar", "smooth"])
    family_depth: int = Field(4, ge=1, description="Finest scale of generated collections.")
    densities: List[float] = Field(default_factory=lambda: [1.0, 0.25, 1.0 / 16, 1.0 / 64])
    p_values: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    weights: List[WeightRecipe] = Field(default_factory=list)
    corpus: CorpusRecipe = Field(default_factory=CorpusRecipe)
    epsilon: float = Field(default_factory=lambda: settings.SIZE_EPSILON, gt=0)
    decay: float = Field(default_factory=lambda: settings.DECAY_EXPONENT, gt=0)
    tolerance: float = Field(default_factory=lambda: settings.STABILITY_TOLERANCE, gt=0)
    refine: bool = Field(True, description="Rerun at doubled resolution for the stability verdict.")
    seed: int = Field(0, ge=0)
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        _check_exponents(self.p_values, "p")
        if any(not 0 < rho <= 1 for rho in self.densities):
            raise ValueError(f"densities must lie in (0, 1], got {self.densities}")
        if self.factor_dims and sum(self.factor_dims) != self.grid.dimension:
            raise ValueError(f"factor dimensions {self.factor_dims} do not sum to d={self.grid.dimension}")
        return self


# --- Reports ---

class ReportRecord(BaseModel):
    """One (fixture, parameter tuple) measurement."""
    fixture: int = Field(..., examples=[0])
    kind: str = Field(..., examples=["main"])
    parameters: Dict[str, Any] = Field(default_factory=dict)
    lhs: float = Field(..., description="Left side of the inequality.")
    rhs: float = Field(..., description="Right side of the inequality.")
    ratio: Optional[float] = Field(None, description="lhs/rhs; null when both sides vanish.")
    refined_ratio: Optional[float] = Field(None, description="Same ratio at doubled resolution.")
    extra: Dict[str, Any] = Field(default_factory=dict)


class Report(BaseModel):
    """Complete output of run_experiment."""
    kind: str
    seed: int
    config_digest: str
    environment_digest: str
    records: List[ReportRecord] = Field(default_factory=list)
    max_ratio: Optional[float] = None
    refined_max_ratio: Optional[float] = None
    growth: Optional[float] = Field(None, description="refined_max_ratio / max_ratio - 1.")
    stable: Optional[bool] = None
    invariants: Dict[str, bool] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)


class SizeReport(BaseModel):
    """Size of an indicator with respect to a collection."""
    value: float = Field(..., ge=0)
    cube: Optional[str] = Field(None, description="Attaining cube id 'k x_1 ... x_d'.", examples=["2 1"])
    decay: float


class NormRecord(BaseModel):
    """JSON record for a norm or size evaluation."""
    op: str
    inputs_digest: str
    value: float
    cube: Optional[str] = None


class ApReport(BaseModel):
    """Grid estimate of an A_p characteristic (a stability heuristic, not a proof)."""
    p: float
    mode: Literal["cubes", "rectangles"]
    estimate: float
    window: Optional[str] = Field(None, description="Attaining window as 'scales@block+shift', the shift in cells.")
    coarse_estimate: Optional[float] = None
    stable: Optional[bool] = None
    clamped: bool = False
    heuristic: str = "grid-stability"


class AInfinityReport(BaseModel):
    """Smallest resolution-stable q found by the A_infinity probe."""
    q_w: Optional[float] = Field(None, description="None means unstable up to q_max.")
    stable: bool
    floor_reached: bool = False
    q_max: float
    estimate: Optional[float] = None
    heuristic: str = "grid-stability"


class ReverseHolderReport(BaseModel):
    """Largest stable reverse Hoelder exponent and its constant."""
    epsilon: float
    constant: float
    ceiling_reached: bool = False
    degenerate: bool = False
    heuristic: str = "grid-stability"


class InvariantResult(BaseModel):
    """Outcome of one preflight invariant check."""
    name: str
    module: str
    passed: bool
    detail: str = ""
