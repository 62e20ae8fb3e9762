"""Finite element toolkit for the local Dirichlet-to-Neumann map of piecewise
homogeneous elastic media: forward solves, Frechet derivatives, projected
reconstruction and empirical stability probes."""
from .deriv import DfJacobian, df_apply, df_jacobian, df_lipschitz_probe, taylor_order
from .dtn import (BoundaryMetric, DtnOperator, ForwardMap, alessandrini_gap, assemble_dtn,
                  boundary_metric, forward_map, star_norm)
from .errors import (ConfigurationError, DimensionError, DomainError, ElasticDtnError,
                     FrequencyRangeError, GeometryError, MeshParseError, MeshValidationError,
                     ResolutionError, SolverError, StagnationError)
from .fem import assemble, coercivity_check, mesh_assembly, volume_pairing
from .invert import (InversionConfig, InversionTrace, landweber, relative_error,
                     stability_consistency, synthesize_data)
from .material import (ConstraintSet, IsotropicTensor, ParamVector, PriorData, apply_tensor,
                       project_onto_K, reference_tensor, sample_K, sigma, sigma1, sigma1_iterated)
from .mesh import (Block, PartitionedMesh, build_block_mesh, checkerboard_blocks, load_mesh,
                   parse_mesh, save_mesh, two_block_blocks, validate_partition)
from .probes import (ProbeReport, greens_blowup_probe, lipschitz_probe, modulus_comparison,
                     q0_probe)
from .solver import (admissible_frequency_bound, pcg, smallest_dirichlet_eigenvalue,
                     solve_dirichlet)

__all__ = [name for name in dir() if not name.startswith("_")]
