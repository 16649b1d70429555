"""Interior-penalty dG assembly on general polytopic meshes.

The package assembles the hp-version symmetric interior-penalty
discontinuous Galerkin discretization of advection-diffusion-reaction
problems (including degenerate and space-time parabolic cases) on meshes of
agglomerated simplices, with two cross-validating assembly algorithms, a
slab-marching space-time solver, and communication-free partitioned
assembly of row-distributed matrices.
"""

from .basis import BasisSpec, Family, build_basis, num_basis
from .mesh import (
    BOUNDARY,
    BoundaryTag,
    MeshError,
    PolytopicMesh,
    SimplicialMesh,
    agglomerate,
    identity_agglomeration,
    load_agglomeration_map,
    load_simplicial_mesh,
)
from .model import (
    NAMED_PROBLEMS,
    PdeCoefficients,
    PenaltyConfig,
    classify_boundary_faces,
    penalty_sigma,
)
from .assembly import (
    AssemblyConfig,
    AssemblyStats,
    CSRMatrix,
    DofMap,
    assemble_approach1,
    assemble_approach2,
    build_block_pattern,
    read_matrix_market,
    triplets_to_csr,
    write_matrix_market,
)

__all__ = [
    "BOUNDARY",
    "AssemblyConfig",
    "AssemblyStats",
    "BasisSpec",
    "BoundaryTag",
    "CSRMatrix",
    "DofMap",
    "Family",
    "MeshError",
    "NAMED_PROBLEMS",
    "PdeCoefficients",
    "PenaltyConfig",
    "PolytopicMesh",
    "SimplicialMesh",
    "agglomerate",
    "assemble_approach1",
    "assemble_approach2",
    "build_basis",
    "build_block_pattern",
    "classify_boundary_faces",
    "identity_agglomeration",
    "load_agglomeration_map",
    "load_simplicial_mesh",
    "num_basis",
    "penalty_sigma",
    "read_matrix_market",
    "triplets_to_csr",
    "write_matrix_market",
]

__version__ = "0.1.0"
