"""Bounds for mixed reinsurance/dividend/injection control problems.

The package simulates controlled Cramér–Lundberg surplus processes, builds
their occupation measures, and runs a two-stage dual dynamic programming
loop whose forward pass produces simulated lower bounds and whose backward
pass produces certified polynomial upper bounds on the value function.
"""

from reinsddp.models import (
    ClaimLaw,
    ModelError,
    PremiumSpec,
    RetentionPolicy,
    RiskModel,
    SpaceBounds,
    check_premium_box,
    premium_norms,
    premium_transform,
    premium_transform_coeffs,
    retained_claim_moment,
    retained_claim_moment_coeffs,
    retained_power_mean,
    space_bounds,
)
from reinsddp.simulate import (
    GainEstimate,
    StrategySpec,
    TrajectoryRecord,
    estimate_gain,
    simulate_ensemble,
    simulate_path,
)
from reinsddp.occupation import (
    AtomMeasure,
    OccupationSystem,
    adjoint_identity_residual,
    build_occupation,
    extend_negative,
    system_from_json,
    system_to_json,
    validate_system,
)
from reinsddp.moments import (
    MomentVector,
    localizing_matrix,
    moment_matrix,
    moments_from_atoms,
    putinar_check,
)
from reinsddp.generator import (
    PolyValueFn,
    RetentionFamily,
    check_dual_feasibility,
    generator_on_monomial,
    hamiltonian,
    hjb_residual,
)
from reinsddp.ddp import (
    DdpConfig,
    DdpError,
    IterationLog,
    backward_step_grid,
    backward_step_sos,
    forward_scan,
    forward_step,
    run_ddp,
)
from reinsddp.config import ConfigError, RunConfig, parse_config

__version__ = "0.1.0"
