"""semvox: sparse hierarchical TSDF mapping with Bayesian semantic fusion.

A volumetric mapping toolkit built around a three-level sparse voxel tree.
Geometry is fused as a truncated signed distance field; semantics attach to
the same voxels either as closed-set Dirichlet label posteriors or open-set
Normal-Inverse-Gamma feature posteriors.  A compiled core accelerates the
hot loops when available, with a pure-numpy fallback selected at import.
"""

from .backend import NATIVE_AVAILABLE, get_backend
from .config import (
    CameraConfig,
    ClosedSetConfig,
    FusionConfig,
    OpenSetConfig,
    TreeConfig,
)
from .errors import (
    ConfigError,
    FormatError,
    OutOfRangeError,
    PayloadMismatchError,
    SemvoxError,
    UserInputError,
)
from .evalbench import (
    BenchReport,
    SegmentationScores,
    chamfer_l2,
    miou,
    run_benchmark,
    sparsity_report,
    truth_grid_analytic,
    truth_grid_fused,
)
from .fusion import (
    Frame,
    IntegrationReport,
    integrate_frame,
    make_grids,
    raycast_band,
)
from .gaussian import cosine_to_embeddings, one_hot_bridge_ratio, query_classes
from .grid import (
    ClosedPayload,
    OpenPayload,
    SparseGrid,
    TsdfPayload,
    grids_equal,
    load_grids,
    save_grids,
)
from .ingest import load_frame, load_manifest, project_depth
from .mesh import SemanticMesh, default_palette, extract_mesh, read_ply, write_ply
from .render import RenderCamera, render, sample_distance
from .synthetic import Scene, make_scene, scene_names, write_sequence

__version__ = "0.1.0"

__all__ = [
    "BenchReport",
    "CameraConfig",
    "ClosedPayload",
    "ClosedSetConfig",
    "ConfigError",
    "FormatError",
    "Frame",
    "FusionConfig",
    "IntegrationReport",
    "NATIVE_AVAILABLE",
    "OpenPayload",
    "OpenSetConfig",
    "OutOfRangeError",
    "PayloadMismatchError",
    "RenderCamera",
    "Scene",
    "SegmentationScores",
    "SemanticMesh",
    "SemvoxError",
    "SparseGrid",
    "TreeConfig",
    "TsdfPayload",
    "UserInputError",
    "chamfer_l2",
    "cosine_to_embeddings",
    "default_palette",
    "extract_mesh",
    "get_backend",
    "grids_equal",
    "integrate_frame",
    "load_frame",
    "load_grids",
    "load_manifest",
    "make_grids",
    "make_scene",
    "miou",
    "one_hot_bridge_ratio",
    "project_depth",
    "query_classes",
    "raycast_band",
    "read_ply",
    "render",
    "run_benchmark",
    "sample_distance",
    "save_grids",
    "scene_names",
    "sparsity_report",
    "truth_grid_analytic",
    "truth_grid_fused",
    "write_ply",
    "write_sequence",
    "__version__",
]
