"""TOML run configuration, validated before anything is computed."""

from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fem_metric import MetricKind

BUNDLED_PREFIX = "bundled:"


class ConfigError(ValueError):
    """Invalid configuration; ``paths`` lists offending keys such as ``metric.alpha``."""

    def __init__(self, message: str, paths: tuple[str, ...] = ()):
        super().__init__(message)
        self.paths = paths


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------- problem

class CloverProblem(_Strict):
    kind: Literal["clover"]
    a: float = 0.8
    b: float = Field(2.0, gt=0)
    eps: float = 0.001


class AnnulusProblem(_Strict):
    kind: Literal["annulus"]
    r_prime: float = Field(gt=0, lt=1)


class StokesProblem(_Strict):
    kind: Literal["stokes"]
    u_inf: tuple[float, float] = (1.0, 0.0)
    channel_box: tuple[float, float, float, float] = (-3.0, 3.0, -2.0, 2.0)

    @field_validator("channel_box")
    @classmethod
    def _box_ordered(cls, v):
        if not (v[0] < v[1] and v[2] < v[3]):
            raise ValueError("channel_box must be (xmin, xmax, ymin, ymax) with min < max")
        return v


Problem = Annotated[Union[CloverProblem, AnnulusProblem, StokesProblem], Field(discriminator="kind")]


# ---------------------------------------------------------------- mesh

class DiscMesh(_Strict):
    source: Literal["disc"]
    radius: float = Field(3.0, gt=0)
    n_rings: int = Field(18, ge=1)


class AnnulusMesh(_Strict):
    source: Literal["annulus"]
    r_inner: float = Field(0.5, gt=0)
    r_outer: float = Field(1.0, gt=0)
    n_rings: int = Field(8, ge=1)

    @model_validator(mode="after")
    def _radii(self):
        if not self.r_inner < self.r_outer:
            raise ValueError("r_inner must be smaller than r_outer")
        return self


class FileMesh(_Strict):
    source: Literal["file"]
    path: str
    format: Optional[Literal["native_json", "gmsh22"]] = None


class BundledMesh(_Strict):
    source: Literal["bundled"]
    name: str = "channel"


MeshSource = Annotated[Union[DiscMesh, AnnulusMesh, FileMesh, BundledMesh], Field(discriminator="source")]


# ---------------------------------------------------------------- metric

class FemMetric(_Strict):
    type: Literal["fem"]
    kind: str = "CR_PLUS_HSYM"
    alpha: float = Field(1e-2, gt=0)
    weighted: bool = False
    epsilon: float = Field(0.1, gt=0)
    clamped_tags: tuple[str, ...] = ("GAMMA_INF",)
    reassemble: bool = False

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, v):
        try:
            MetricKind[v.upper()]
        except KeyError:
            raise ValueError(f"unknown metric kind {v!r}; choose from {[k.name for k in MetricKind]}") from None
        return v.upper()

    @property
    def metric_kind(self) -> MetricKind:
        return MetricKind[self.kind]

    def label(self) -> str:
        k = self.metric_kind
        return f"{k.name}(alpha={self.alpha:g})" if k.has_cr else k.name


class RkhsMetric(_Strict):
    type: Literal["rkhs"]
    # false selects the plain kernel inner product and ignores alpha
    cr_penalty: bool = True
    alpha: float = Field(1e-4, gt=0)
    sigma: Optional[float] = Field(None, gt=0)
    sigma_factor: float = Field(4.0, gt=0)
    weighted: bool = False
    epsilon: float = Field(0.1, gt=0)

    def label(self) -> str:
        return f"CR_PLUS_KERNEL(alpha={self.alpha:g})" if self.cr_penalty else "KERNEL"

    @property
    def effective_alpha(self) -> float | None:
        return self.alpha if self.cr_penalty else None


Metric = Annotated[Union[FemMetric, RkhsMetric], Field(discriminator="type")]


# ---------------------------------------------------------------- run control

class OptimizerSection(_Strict):
    max_iters: int = Field(300, ge=0)
    g_tol: float = Field(0.0, ge=0)
    g_rtol: float = Field(1e-5, ge=0)
    memory: int = Field(5, ge=0)
    # largest nodal move of a trial step, in mean edge lengths; 0 disables
    max_step_edges: float = Field(1.0, ge=0)


class AugmentedLagrangianSection(_Strict):
    rho: float = Field(10.0, gt=0)
    outer_iters: int = Field(10, ge=1)
    inner_iters: int = Field(30, ge=1)
    g_rtol: float = Field(1e-2, ge=0)
    c_tol: float = Field(1e-4, gt=0)
    estimate_multipliers: bool = True


class OutputSection(_Strict):
    directory: str = "runs/default"
    snapshot_every: int = Field(0, ge=0)
    histogram_bins: tuple[float, ...] = (1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.75, 2.0, 2.5, 3.0, 5.0)

    @field_validator("histogram_bins")
    @classmethod
    def _increasing(cls, v):
        if len(v) < 2 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("histogram_bins must be strictly increasing with at least two edges")
        return v


class SweepSection(_Strict):
    alphas: tuple[float, ...]
    include_baseline: bool = True
    baseline_kind: str = "HSYM_RING"

    @field_validator("alphas")
    @classmethod
    def _positive(cls, v):
        if any(a <= 0 for a in v):
            raise ValueError("sweep alphas must be positive")
        return v


class RunConfig(_Strict):
    problem: Problem
    mesh: MeshSource
    metric: Metric
    optimizer: OptimizerSection = OptimizerSection()
    augmented_lagrangian: AugmentedLagrangianSection = AugmentedLagrangianSection()
    output: OutputSection = OutputSection()
    sweep: Optional[SweepSection] = None
    seed: int = 0
    name: str = ""

    @model_validator(mode="after")
    def _consistent(self):
        if self.problem.kind == "stokes" and isinstance(self.metric, RkhsMetric):
            raise ValueError("the Stokes problem is set up for FEM metrics only")
        if self.problem.kind == "stokes" and not self.metric.metric_kind.clamped:
            raise ValueError("the Stokes problem needs a clamped metric kind (channel walls stay fixed)")
        if self.sweep is not None and not isinstance(self.metric, FemMetric):
            raise ValueError("alpha sweeps are defined for FEM metrics")
        return self


# ---------------------------------------------------------------- loading

_TAGS = {"clover", "annulus", "stokes", "disc", "file", "bundled", "fem", "rkhs"}


def _key_path(loc) -> str:
    # drop discriminator tags pydantic inserts for tagged unions
    parts = [str(p) for i, p in enumerate(loc) if not (i == 1 and p in _TAGS)]
    return ".".join(parts)


def validate_config(data: dict, base_dir: Path | None = None) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        paths = tuple(_key_path(e["loc"]) or "<root>" for e in exc.errors())
        lines = [f"{p}: {e['msg']}" for p, e in zip(paths, exc.errors())]
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines), paths) from None
    if base_dir is not None and isinstance(cfg.mesh, FileMesh) and not Path(cfg.mesh.path).is_absolute():
        mesh = cfg.mesh.model_copy(update={"path": str(base_dir / cfg.mesh.path)})
        cfg = cfg.model_copy(update={"mesh": mesh})
    return cfg


def bundled_config_names() -> list[str]:
    root = resources.files("conformal_deform") / "data" / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def read_config_text(ref: str | Path) -> tuple[str, str, Path | None]:
    """Return ``(text, name, base_dir)`` for a path or a ``bundled:NAME`` reference."""
    ref = str(ref)
    if ref.startswith(BUNDLED_PREFIX):
        name = ref[len(BUNDLED_PREFIX):]
        res = resources.files("conformal_deform") / "data" / "configs" / f"{name}.toml"
        if not res.is_file():
            raise ConfigError(f"no bundled config {name!r}; available: {', '.join(bundled_config_names())}")
        return res.read_text(), name, None
    path = Path(ref)
    try:
        return path.read_text(), path.stem, path.resolve().parent
    except OSError as exc:
        raise ConfigError(f"cannot read config {ref}: {exc.strerror}") from None


def load_config(ref: str | Path) -> RunConfig:
    text, name, base_dir = read_config_text(ref)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{ref}: {exc}") from None
    data.setdefault("name", name)
    return validate_config(data, base_dir)
