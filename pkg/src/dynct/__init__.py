"""Dynamic cone-beam CT reconstruction.

Approximate inversion of the cone-beam ray transform of a deforming,
attenuated object.  The estimator recovers the reference-time density
up to a smoothing remainder and suppresses the streak artifacts that a
naive backprojection produces along critical directions.
"""

from .branches import (
    AdmissibilityParams,
    BranchScanner,
    CriticalArc,
    RootBranch,
    arc_endpoint_limit,
    continue_root,
    ds_dt,
    find_admissible_roots,
    partition_weights,
    smooth_window,
    theta_crit,
    xi_crit_arc,
)
from .data import (
    AnalyticConeBeamDataset,
    ConeBeamData,
    DetectorGrid,
    DirectionalCutoff,
    GriddedConeBeamDataset,
    MaskedConeBeamData,
    grangeat_plane_derivative,
    grangeat_rows,
    q_dynamic,
)
from .errors import (
    AccuracyError,
    ConfigError,
    ContinuationError,
    CoverageError,
    CriticalityError,
    DegenerateDirectionError,
    DegenerateLimitError,
    DomainError,
    DynctError,
    FormatError,
    GridMismatchError,
    InsufficientDomainError,
    InvalidDeformationError,
    MissingInputError,
    NoAdmissibleRootError,
    ValidationError,
)
from .fileio import read_dataset, read_volume, write_dataset, write_pgm_slices, write_volume
from .geometry import (
    AffineDeformation,
    AttenuationWeight,
    Box,
    CircleTrajectory,
    ConstantAttenuation,
    Deformation,
    EpsilonFamily,
    GridDeformation,
    IdentityDeformation,
    LineSegmentTrajectory,
    PulseAttenuation,
    RadialPulseDeformation,
    RotationDeformation,
    Scene,
    Trajectory,
    TwoCirclesTrajectory,
    pulse_family,
)
from .phantom import Ellipsoid, GaussianBlob, Phantom, ball
from .reconstruct import (
    ReconstructionParams,
    SphereQuadrature,
    VoxelGrid,
    convergence_sweep,
    error_metrics,
    direction_exposure,
    gradient_energy,
    laplacian_filter,
    point_value,
    reconstruct_points,
    reconstruct_static_localized,
    reconstruct_volume,
    risk_values,
    risk_volume,
    xstarx_points,
    xstarx_volume,
)

__version__ = "1.0.0"

__all__ = [name for name in dir() if not name.startswith("_")]
