"""Goal-oriented geometric defeaturing on THB-spline discretizations.

The package covers the full pipeline: boundary fitting on hierarchical
spline trace spaces, elliptic grid generation for the interior
parameterization, an isogeometric Poisson solver with adjoint, per-function
shape gradients of a quantity of interest, and the adaptive
fit/solve/estimate/mark/refine loop that produces a simplified geometry.
"""

from .boundary_fit import (BoundaryCurve, ExactBoundary, FitConfig,
                           FitError, PointConstraint, corner_constraints,
                           detect_self_intersections, fit_boundary,
                           repair_self_intersections)
from .defeature_loop import (IterationRecord, LoopError, RunConfig,
                             run_defeaturing)
from .hierarchy import (HierarchicalMesh, HierarchyError, ThbBasis,
                        BoundaryDofSet, boundary_dofs, build_thb_basis,
                        minimal_refinement_set)
from .parameterization import (ConvergenceError, EggConfig, EggError,
                               FoldError, GeometryMap, initial_map,
                               parameterize, project_map, solve_egg)
from .pde import (DiscreteField, Integrand, PdeError, PdeProblem,
                  PoissonSolver, QoiSpec, ScalarField, evaluate_functional,
                  solve_state)
from .problem_io import (ProblemFileError, ProblemSpec, dump_problem,
                         load_problem, parse_problem, problem_to_toml,
                         run_record_csv, write_geometry_dump,
                         write_mesh_dump, write_run_record)
from .shape_gradient import (CompanionFit, GradientError, GradientReport,
                             ShapeDirection, assemble_report, companion_fit,
                             directional_derivative, unit_boundary_gradients)
from .splines import KnotVector, SplineError, TensorSplineSpace
from .quadrature import BoundarySideQuadrature, QuadratureRegistry

__version__ = "0.1.0"
