"""Voltage-collapse margins on the power-flow solution manifold."""

from .network import BranchSpec, BusKind, BusSpec, GridCase, GridDataError, ZipSplit, build_admittance
from .model import (
    DynamicClassicalModel,
    MetricMap,
    MetricOutput,
    MetricOutputKind,
    StaticDispatchModel,
    StudyModel,
)
from .cases import (
    builtin_study,
    case9mod1,
    case9mod2,
    case39,
    study_case9mod1_dynamic,
    study_case9mod1_static,
    study_case9mod2,
    study_case39,
    BUILTIN_STUDIES,
)
from .powerflow import (
    ContinuationOptions,
    ContinuationTrace,
    InitialPointOffManifold,
    MaxIterations,
    SingularJacobian,
    StepCollapse,
    continuation_trace,
    newton_solve,
    trace_to_csv,
)
from .singularity import (
    SIGMA_SINGULAR,
    EndpointNotSingular,
    OffManifoldSample,
    SingularDiagnosis,
    SurfaceClass,
    classify_endpoint_surface,
    det_sign,
    diagnose,
    nose_point_count,
    smallest_singular_pair,
)

from .nlp import (
    DerivativeReport,
    NlpOptions,
    NlpProblem,
    SolveReport,
    SolveStatus,
    check_derivatives,
    solve,
    write_iteration_log,
)
from .euclidean import EuclideanResult, build_euclidean_nlp, generate_seeds, solve_multistart
from .pathopt import (
    AssociatedPath,
    DiscretizedPath,
    MarginResult,
    Objective,
    Scheme,
    TerminalCondition,
    Transcription,
    TranscriptionOptions,
    arc_length,
    correct_path_nodes,
    default_direction,
    geodesic_between_points,
    path_from_nodes,
    seed_from_continuation,
    solve_shortest_path,
    trace_associated_path,
    transcribe,
)

__version__ = "0.1.0"
