"""Turn a validated :class:`RunConfig` into runs and artifact files."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import AnnulusMesh, BundledMesh, DiscMesh, FemMetric, FileMesh, RkhsMetric, RunConfig
from .fem_metric import InnerProductSpec, MetricKind, build_metric, weight_mu
from .functionals import annulus, clover
from .mesh import GAMMA, TriMesh, element_quality, gen_annulus, gen_disc, quality_histogram, validate, MeshError
from .mesh_io import GMSH22_ASCII, NATIVE_JSON, export_vtk, load_bundled, load_mesh, save_mesh
from .optimizer import (
    HISTORY_FIELDS,
    KernelControl,
    LevelsetObjective,
    NodalControl,
    OptimRun,
    ShapeProblem,
    StokesObjective,
    augmented_lagrangian_run,
    lbfgs_run,
    moving_average,
)
from .rkhs import KernelInterpolation, KernelMetric, KernelModel
from .stokes import obstacle_geometry

log = logging.getLogger(__name__)

ARTIFACTS = (
    "initial_mesh.vtk",
    "initial_mesh.json",
    "final_mesh.vtk",
    "final_mesh.json",
    "quality_initial.csv",
    "quality_final.csv",
    "convergence.csv",
    "summary.json",
)

COMPARISON_FIELDS = ("name", "metric", "status", "iterations", "J_final", "eta_max", "eta_frac_gt2", "grad_norm")


def build_mesh(cfg: RunConfig) -> TriMesh:
    m = cfg.mesh
    if isinstance(m, DiscMesh):
        mesh = gen_disc(m.radius, m.n_rings)
    elif isinstance(m, AnnulusMesh):
        mesh = gen_annulus(m.r_inner, m.r_outer, m.n_rings)
    elif isinstance(m, FileMesh):
        fmt = {None: None, "native_json": NATIVE_JSON, "gmsh22": GMSH22_ASCII}[m.format]
        try:
            mesh = load_mesh(m.path, fmt)
        except OSError as exc:
            raise MeshError(f"cannot read mesh {m.path}: {exc.strerror}") from None
    elif isinstance(m, BundledMesh):
        try:
            mesh = load_bundled(m.name)
        except FileNotFoundError:
            raise MeshError(f"no bundled mesh named {m.name!r}") from None
    else:  # pragma: no cover - guarded by the schema
        raise TypeError(m)
    report = validate(mesh)
    if not report:
        raise MeshError(f"initial mesh has inverted triangle {report.bad_triangles[0]}")
    return mesh


def build_objective(cfg: RunConfig):
    p = cfg.problem
    if p.kind == "clover":
        return LevelsetObjective(clover(p.a, p.b, p.eps))
    if p.kind == "annulus":
        return LevelsetObjective(annulus(p.r_prime))
    return StokesObjective(p.u_inf)


def fem_spec(metric: FemMetric, kind: MetricKind | None = None, alpha: float | None = None) -> InnerProductSpec:
    return InnerProductSpec(
        kind or metric.metric_kind,
        alpha if alpha is not None else metric.alpha,
        metric.weighted,
        metric.epsilon,
        frozenset(metric.clamped_tags),
    )


def build_control_and_metric(cfg: RunConfig, mesh: TriMesh):
    """``(control, metric, metric_factory)``; the factory is set when reassembling."""
    m = cfg.metric
    if isinstance(m, FemMetric):
        spec = fem_spec(m)
        factory = (lambda deformed: build_metric(deformed, spec)) if m.reassemble else None
        return NodalControl(mesh.n_nodes), build_metric(mesh, spec), factory
    assert isinstance(m, RkhsMetric)
    sigma = m.sigma if m.sigma is not None else m.sigma_factor * mesh.mean_edge_length()
    mu = weight_mu(mesh, m.epsilon, mesh.nodes) if m.weighted else None
    model = KernelModel(mesh.nodes.copy(), sigma, mesh.nodes.copy(), mu)
    return KernelControl(KernelInterpolation(model, mesh.nodes)), KernelMetric(model.system, m.effective_alpha), None


def _eta_stats(mesh: TriMesh) -> dict:
    eta = element_quality(mesh)
    return {
        "eta_min": float(eta.min()),
        "eta_max": float(eta.max()),
        "eta_mean": float(eta.mean()),
        "eta_frac_gt2": float(np.mean(eta > 2.0)),
    }


@dataclass(eq=False)
class RunResult:
    config: RunConfig
    initial: TriMesh
    final: TriMesh
    run: OptimRun
    summary: dict
    label: str
    snapshots: list = field(default_factory=list)


def _max_step(cfg: RunConfig, mesh: TriMesh):
    f = cfg.optimizer.max_step_edges
    return f * mesh.mean_edge_length() if f > 0 else None


def execute(cfg: RunConfig, snapshot_every: int | None = None) -> RunResult:
    """Run the configured optimisation (without a sweep) and summarise it."""
    mesh = build_mesh(cfg)
    objective = build_objective(cfg)
    control, metric, factory = build_control_and_metric(cfg, mesh)
    opt = cfg.optimizer
    every = cfg.output.snapshot_every if snapshot_every is None else snapshot_every
    snapshots: list[tuple[int, np.ndarray]] = []

    def keep(run: OptimRun):
        it = run.history[-1]["iter"]
        if every and it % every == 0:
            snapshots.append((it, run.x.copy()))

    summary: dict = {"name": cfg.name, "problem": cfg.problem.kind, "metric": cfg.metric.label()}
    if cfg.problem.kind == "stokes":
        al = cfg.augmented_lagrangian
        box = cfg.problem.channel_box
        res = augmented_lagrangian_run(
            mesh, objective, metric, rho=al.rho, outer_iters=al.outer_iters, inner_iters=al.inner_iters,
            g_tol=opt.g_tol, g_rtol=al.g_rtol, c_tol=al.c_tol, memory=opt.memory,
            max_displacement=_max_step(cfg, mesh), estimate_multipliers=al.estimate_multipliers,
            channel_box=box,
        )
        run = res.run
        problem = ShapeProblem(mesh, objective, control)
        final = problem.displaced(run.x)
        g0, g1 = obstacle_geometry(mesh, box), obstacle_geometry(final, box)
        J0, J1 = objective(mesh)[0], objective(final)[0]
        width = box[3] - box[2]
        x0, x1 = (m.nodes[m.nodes_with_tags([GAMMA])] for m in (mesh, final))
        summary["constraints"] = {
            "volume_initial": g0.volume,
            "volume_final": g1.volume,
            "volume_rel_residual": abs(g1.volume - g0.volume) / g0.volume,
            "barycentre_initial": g0.barycentre.tolist(),
            "barycentre_final": g1.barycentre.tolist(),
            "barycentre_residual": float(np.linalg.norm(g1.barycentre - g0.barycentre)),
            "barycentre_residual_per_width": float(np.linalg.norm(g1.barycentre - g0.barycentre) / width),
            "multipliers": res.state.multipliers.tolist(),
            "initial_multipliers": res.initial_multipliers.tolist(),
            "rho": res.state.rho,
            "outer_iterations": res.outer_iterations,
        }
        summary["obstacle"] = {
            "x_extent_initial": float(np.ptp(x0[:, 0])),
            "x_extent_final": float(np.ptp(x1[:, 0])),
            "y_extent_initial": float(np.ptp(x0[:, 1])),
            "y_extent_final": float(np.ptp(x1[:, 1])),
        }
        summary["J_initial"], summary["J_final"] = float(J0), float(J1)
    else:
        problem = ShapeProblem(mesh, objective, control)
        run = lbfgs_run(
            problem, metric, opt.max_iters, opt.g_tol, opt.memory, g_rtol=opt.g_rtol,
            max_displacement=_max_step(cfg, mesh), metric_factory=factory, callback=keep,
        )
        final = problem.displaced(run.x)
        summary["J_initial"], summary["J_final"] = run.history[0]["J"], run.final["J"]
    last = run.final
    summary.update({
        "status": run.status,
        "message": run.message,
        "iterations": run.iterations,
        "grad_norm_initial": run.history[0]["grad_norm"],
        "grad_norm": last["grad_norm"],
        "cr_residual": last["cr_residual"],
        "initial_quality": _eta_stats(mesh),
        "final_quality": _eta_stats(final),
        "n_nodes": mesh.n_nodes,
        "n_triangles": mesh.n_triangles,
        "seed": cfg.seed,
        "config": cfg.model_dump(mode="json"),
    })
    summary.update({k: summary["final_quality"][k] for k in ("eta_max", "eta_frac_gt2")})
    snaps = [(it, problem.displaced(x)) for it, x in snapshots]
    return RunResult(cfg, mesh, final, run, summary, cfg.metric.label(), snaps)


# ---------------------------------------------------------------- writers

def write_history_csv(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["iter"], *(repr(float(row[k])) for k in HISTORY_FIELDS[1:])])


def read_history_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "iter" else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def _write_histogram(path: Path, mesh: TriMesh, bins) -> None:
    counts = quality_histogram(element_quality(mesh), bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(bins[:-1], bins[1:], counts):
            w.writerow([lo, hi, int(c)])


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def write_artifacts(result: RunResult, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    bins = list(result.config.output.histogram_bins)
    for tag, mesh in (("initial", result.initial), ("final", result.final)):
        export_vtk(mesh, out / f"{tag}_mesh.vtk", cell_data={"eta": element_quality(mesh)})
        save_mesh(mesh, out / f"{tag}_mesh.json", NATIVE_JSON)
        _write_histogram(out / f"quality_{tag}.csv", mesh, bins)
    write_history_csv(out / "convergence.csv", result.run.history)
    if result.snapshots:
        snap_dir = out / "snapshots"
        snap_dir.mkdir(exist_ok=True)
        for it, mesh in result.snapshots:
            export_vtk(mesh, snap_dir / f"iter_{it:04d}.vtk", cell_data={"eta": element_quality(mesh)})
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, default=_json_default))
    return out


# ---------------------------------------------------------------- sweeps and comparisons

def execute_sweep(cfg: RunConfig, out: Path) -> list[dict]:
    """One run per alpha (plus the no-CR baseline) with full artifacts per run."""
    sweep = cfg.sweep
    assert sweep is not None and isinstance(cfg.metric, FemMetric)
    members: list[tuple[str, RunConfig]] = []
    for a in sweep.alphas:
        metric = cfg.metric.model_copy(update={"alpha": a})
        members.append((f"alpha_{a:g}", cfg.model_copy(update={"metric": metric, "sweep": None})))
    if sweep.include_baseline:
        metric = cfg.metric.model_copy(update={"kind": sweep.baseline_kind.upper()})
        members.append(("baseline", cfg.model_copy(update={"metric": metric, "sweep": None})))
    rows, traces = [], {}
    for label, member in members:
        res = execute(member)
        write_artifacts(res, out / label)
        g = [r["grad_norm"] for r in res.run.history]
        traces[label] = moving_average(g, 5)
        rows.append({
            "label": label,
            "alpha": member.metric.alpha if label != "baseline" else "",
            "eta_max": res.summary["eta_max"],
            "eta_frac_gt2": res.summary["eta_frac_gt2"],
            "iterations": res.summary["iterations"],
            "grad_norm": res.summary["grad_norm"],
            "J_final": res.summary["J_final"],
            "status": res.summary["status"],
        })
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["label"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    n = max((len(t) for t in traces.values()), default=0)
    with open(out / "gradient_moving_average.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", *traces])
        for i in range(n):
            # the average over iterations i-4..i is reported at iteration i
            w.writerow([i + 4, *(repr(float(t[i])) if i < len(t) else "" for t in traces.values())])
    return rows


def comparison_row(name: str, summary: dict) -> dict:
    return {
        "name": name,
        "metric": summary["metric"],
        "status": summary["status"],
        "iterations": summary["iterations"],
        "J_final": summary["J_final"],
        "eta_max": summary["eta_max"],
        "eta_frac_gt2": summary["eta_frac_gt2"],
        "grad_norm": summary["grad_norm"],
    }


def row_from_artifacts(run_dir: Path) -> dict:
    summary = json.loads((Path(run_dir) / "summary.json").read_text())
    return comparison_row(summary.get("name") or Path(run_dir).name, summary)


def write_comparison_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def read_comparison_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def check_comparable(configs: list[RunConfig]) -> None:
    ref = configs[0]
    for c in configs[1:]:
        if c.problem != ref.problem:
            raise ValueError(f"config {c.name!r} optimises a different problem than {ref.name!r}")
        if c.mesh != ref.mesh:
            raise ValueError(f"config {c.name!r} uses a different mesh than {ref.name!r}")

