"""Run configuration: YAML text validated against a strict schema.

Every section rejects unknown keys. Defaults are the method's standard
values (p=6, q=2, l=100, epsilon = 2 x smallest background cell edge,
alpha_min=1e-3, convergence threshold 5e-4); problem-specific defaults
(mesh sizes, partition, volume fraction, layout) come from the named
built-in problem when left unset.

Example::

    problem: {name: cantilever}
    mesh: {background: [320, 160], n_be: 4}
    max_iters: 300
"""

from __future__ import annotations

from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

PROBLEM_NAMES = ("cantilever", "mbb", "distributed", "box3d", "custom")


class ConfigError(ValueError):
    """Invalid configuration; the message lists every offending key path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PointLoadSpec(_Strict):
    point: list[float]
    direction: int = Field(ge=0, le=2)
    magnitude: float


class EdgeLoadSpec(_Strict):
    side: Literal["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"]
    direction: int = Field(ge=0, le=2)
    density: float
    span: Optional[list[float]] = None


class SupportSpec(_Strict):
    side: Optional[Literal["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"]] = None
    point: Optional[list[float]] = None
    components: list[int] = [0, 1]

    @model_validator(mode="after")
    def _one_target(self):
        if (self.side is None) == (self.point is None):
            raise ValueError("give exactly one of 'side' or 'point'")
        return self


class RegionSpec(_Strict):
    shape: Literal["box", "cylinder"] = "box"
    lo: Optional[list[float]] = None
    hi: Optional[list[float]] = None
    axis: Optional[int] = None
    center: Optional[list[float]] = None
    radius: Optional[float] = None
    range: Optional[list[float]] = None

    @model_validator(mode="after")
    def _complete(self):
        need = ("lo", "hi") if self.shape == "box" else ("axis", "center", "radius", "range")
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.shape} region needs {', '.join(missing)}")
        return self


class ProblemSection(_Strict):
    name: Literal[PROBLEM_NAMES] = "cantilever"
    lengths: Optional[list[float]] = None
    solid_layers: Optional[int] = Field(default=None, ge=0)
    point_loads: list[PointLoadSpec] = []
    edge_loads: list[EdgeLoadSpec] = []
    supports: list[SupportSpec] = []
    fixed_solid: list[RegionSpec] = []
    fixed_void: list[RegionSpec] = []

    @model_validator(mode="after")
    def _custom_complete(self):
        custom_keys = ("lengths", "point_loads", "edge_loads", "supports", "fixed_solid", "fixed_void")
        if self.name == "custom":
            if self.lengths is None or not self.supports:
                raise ValueError("custom problems need 'lengths' and at least one support")
            if not (self.point_loads or self.edge_loads):
                raise ValueError("custom problems need at least one load")
        else:
            given = [k for k in custom_keys if getattr(self, k)]
            if given:
                raise ValueError(f"{', '.join(given)} only apply to name: custom")
        if self.solid_layers is not None and self.name != "distributed":
            raise ValueError("solid_layers only applies to the distributed problem")
        return self


class MeshSection(_Strict):
    background: Optional[list[int]] = None
    n_be: Optional[int] = Field(default=None, ge=1)
    partition: Optional[list[int]] = None

    @field_validator("background", "partition")
    @classmethod
    def _positive(cls, v):
        if v is not None and (len(v) not in (2, 3) or any(n < 1 for n in v)):
            raise ValueError("must list 2 or 3 positive counts")
        return v


class LayoutSection(_Strict):
    cells: Optional[list[int]] = None
    per_cell: Optional[int] = Field(default=None, ge=1, le=4)
    length_factor: float = Field(default=1.0, gt=0)
    thickness: Optional[float] = Field(default=None, gt=0)
    jitter: float = Field(default=0.0, ge=0, lt=0.5)


class RegularizationSection(_Strict):
    p: int = Field(default=6, ge=2)
    ks_l: float = Field(default=100.0, gt=0)
    eps_factor: float = Field(default=2.0, gt=0)
    alpha_min: float = Field(default=1e-3, gt=0, lt=1)
    q: float = Field(default=2.0, ge=1)

    @field_validator("p")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("p must be even")
        return v


class MaterialSection(_Strict):
    E: float = Field(default=1.0, gt=0)
    nu: float = Field(default=0.3, gt=-1, lt=0.5)


class MmaSection(_Strict):
    move: float = Field(default=0.1, gt=0, le=1)
    angle_move: float = Field(default=0.1, gt=0)
    size_floor: Optional[float] = Field(default=None, gt=0)
    size_cap: Optional[list[float]] = None


class StudySection(_Strict):
    ratios: list[int] = [1, 2, 4, 8]

    @field_validator("ratios")
    @classmethod
    def _ratios(cls, v):
        if not v or any(r < 1 for r in v):
            raise ValueError("ratios must be positive integers")
        return v


class OutputSection(_Strict):
    dir: str = "out"
    snapshot_every: int = Field(default=0, ge=0)
    raster: Literal["png", "pgm", "none"] = "png"
    vtk: bool = True


class RunConfig(_Strict):
    problem: ProblemSection = ProblemSection()
    mesh: MeshSection = MeshSection()
    volume_fraction: Optional[float] = Field(default=None, gt=0, lt=1)
    layout: LayoutSection = LayoutSection()
    regularization: RegularizationSection = RegularizationSection()
    material: MaterialSection = MaterialSection()
    mma: MmaSection = MmaSection()
    max_iters: int = Field(default=1000, ge=1)
    tol: float = Field(default=5e-4, gt=0)
    solver: Literal["auto", "direct", "pcg"] = "auto"
    reanalyze: bool = True
    deterministic: bool = False
    seed: int = 0
    study: StudySection = StudySection()
    output: OutputSection = OutputSection()


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(text: str) -> RunConfig:
    """Parse YAML text into a validated :class:`RunConfig`."""
    try:
        data = yaml.safe_load(text) if text and text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("<root>: configuration must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def with_overrides(cfg: RunConfig, **updates) -> RunConfig:
    """Copy of ``cfg`` with top-level keys replaced and re-validated."""
    try:
        return RunConfig.model_validate({**cfg.model_dump(), **updates})
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def emit_config(cfg: RunConfig) -> str:
    """YAML text that :func:`parse_config` turns back into ``cfg``."""
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


# ----------------------------------------------------------------------------
# config -> driver objects
# ----------------------------------------------------------------------------


def _region(spec: RegionSpec) -> dict:
    return {k: v for k, v in spec.model_dump().items() if v is not None}


def build_problem(cfg: RunConfig):
    """The :class:`~mmc_multires.driver.ProblemDef` a config describes."""
    from .. import driver
    from ..fea import EdgeLoad, LoadCase, PointLoad, Support

    p = cfg.problem
    kw = {}
    if cfg.mesh.background is not None:
        kw["background"] = tuple(cfg.mesh.background)
    if cfg.mesh.n_be is not None:
        kw["n_be"] = cfg.mesh.n_be
    if cfg.mesh.partition is not None:
        kw["partition"] = tuple(cfg.mesh.partition)
    if cfg.volume_fraction is not None:
        kw["volume_fraction"] = cfg.volume_fraction

    if p.name == "custom":
        lengths = tuple(p.lengths)
        dim = len(lengths)
        lc = LoadCase(
            point_loads=[PointLoad(tuple(l.point), l.direction, l.magnitude) for l in p.point_loads],
            edge_loads=[EdgeLoad.on_side(l.side, l.direction, l.density, lengths,
                                         None if l.span is None else tuple(l.span))
                        for l in p.edge_loads],
            supports=[Support(s.side if s.side is not None else tuple(s.point), tuple(s.components))
                      for s in p.supports],
            fixed_solid=[_region(r) for r in p.fixed_solid],
            fixed_void=[_region(r) for r in p.fixed_void],
        )
        if "background" not in kw:
            raise ConfigError("mesh.background: required for custom problems")
        base = driver.ProblemDef(
            "custom", lengths, kw["background"], kw.get("n_be", 1),
            kw.get("partition", (1,) * dim), kw.get("volume_fraction", 0.4), lc,
            driver.LayoutRecipe(cfg.layout.cells or (1,) * dim, cfg.layout.per_cell or 2))
    else:
        if p.solid_layers is not None:
            kw["solid_layers"] = p.solid_layers
        try:
            base = driver.get_problem(p.name, **kw)
        except ValueError as exc:
            raise ConfigError(f"mesh: {exc}") from None

    lay = cfg.layout
    recipe = driver.LayoutRecipe(
        tuple(lay.cells) if lay.cells is not None else base.layout.cells,
        lay.per_cell if lay.per_cell is not None else base.layout.per_cell,
        lay.length_factor, lay.thickness)
    try:
        return base.replace(layout=recipe)
    except ValueError as exc:
        raise ConfigError(f"layout: {exc}") from None


def run_params(cfg: RunConfig):
    from ..driver import RunParams

    r, m, mma = cfg.regularization, cfg.material, cfg.mma
    return RunParams(
        max_iters=cfg.max_iters, tol=cfg.tol, eps_factor=r.eps_factor, alpha_min=r.alpha_min,
        ks_l=r.ks_l, p_exp=r.p, q_penal=r.q, E=m.E, nu=m.nu, move=mma.move,
        angle_move=mma.angle_move, size_floor=mma.size_floor,
        size_cap=None if mma.size_cap is None else tuple(mma.size_cap),
        reanalyze=cfg.reanalyze, solver=cfg.solver, snapshot_every=cfg.output.snapshot_every)


def initial_design(cfg: RunConfig, problem, params):
    """Layout of ``problem`` with optional seeded center jitter
    (``layout.jitter`` x layout-cell size, kept inside the cell)."""
    import numpy as np

    from ..driver import initial_layout

    design = initial_layout(problem.lengths, problem.layout, problem.v_bar, params.p_exp)
    if cfg.layout.jitter > 0:
        rng = np.random.default_rng(cfg.seed)
        h = np.asarray(problem.lengths) / np.asarray(problem.layout.cells)
        dim = problem.dim
        design[:, :dim] += rng.uniform(-1, 1, (len(design), dim)) * cfg.layout.jitter * h
    return design
