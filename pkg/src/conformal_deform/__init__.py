"""Nearly conformal shape-gradient deformations on triangle meshes.

Finite-element and Wendland-kernel Riesz metrics with a Cauchy-Riemann
penalty, levelset and Stokes shape functionals, and an L-BFGS driver that
keeps every iterate on the fixed reference mesh.
"""

from .fem_metric import InnerProductSpec, MetricKind, build_metric, riesz_gradient
from .functionals import annulus, clover, levelset_shape_dual, levelset_value
from .mesh import GAMMA, GAMMA_INF, MeshError, TriMesh, VectorField, element_quality, gen_annulus, gen_disc
from .mesh_io import load_bundled, load_mesh, save_mesh
from .optimizer import ShapeProblem, lbfgs_run

__all__ = [
    "GAMMA",
    "GAMMA_INF",
    "InnerProductSpec",
    "MeshError",
    "MetricKind",
    "ShapeProblem",
    "TriMesh",
    "VectorField",
    "annulus",
    "build_metric",
    "clover",
    "element_quality",
    "gen_annulus",
    "gen_disc",
    "lbfgs_run",
    "levelset_shape_dual",
    "levelset_value",
    "load_bundled",
    "load_mesh",
    "riesz_gradient",
    "save_mesh",
]

__version__ = "0.1.0"
