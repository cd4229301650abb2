"""soclab: a numerical laboratory for learning stochastic optimal controls.

The package simulates controlled diffusions, trains neural-network controls
by gradient descent on a family of interchangeable losses — including a
least-squares matching loss with learned reparameterization matrices — and
checks the learned controls against closed-form or PDE ground truths.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    CorruptModelError,
    DegenerateOracleError,
    DegenerateWeightsError,
    HorizonError,
    ResolutionError,
    ResourceError,
    RunAbortedError,
    SimulationDivergedError,
    SoclabError,
    SplineError,
    WarmStartError,
)
from .problem import (
    InitialLaw,
    ProblemSpec,
    SETTING_NAMES,
    make_linear_quadratic,
    make_setting,
)
from .rng import RngStreams
from .sim import (
    ImportanceWeights,
    TrajectoryBatch,
    euler_step,
    importance_weight,
    rollout,
    sample_increments,
    stochastic_integral,
    work_functional,
)
from .nets import (
    Adam,
    ClosedFormPolicy,
    CompositePolicy,
    GatedMatrices,
    IdentityMatrices,
    Mlp,
    NeuralPolicy,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    LossValue,
    adjoint_grad_estimator,
    adjoint_matching_field,
    adjoint_ode_solve,
    loss_adjoint,
    loss_cross_entropy,
    loss_log_variance,
    loss_moment,
    loss_socm,
    loss_socm_with_field,
    loss_variance,
    matching_field,
    optimal_moment_shift,
    pathwise_grad_estimator,
    tilde_Y,
)
from .ground_truth import (
    HJBGrid1D,
    OracleEstimate,
    RiccatiSolution,
    double_well_solve_1d,
    linear_ou_optimal_control,
    linear_ou_value_table,
    lqr_optimal_control,
    lqr_value,
    make_ground_truth,
    matrix_exponential,
    riccati_solve,
    value_mc_oracle,
)
from .metrics import (
    MetricsRecord,
    alpha_normalized_std,
    control_l2_error,
    control_objective,
    ema_update,
    grad_norm_sq,
    stl_objective,
)
from .warmstart import (
    GaussianSplinePath,
    gaussian_control,
    load_warmstart,
    make_initial_path,
    rgsoc_train,
    save_warmstart,
    spline_eval,
)
from .runner import RunConfig, eval_checkpoint, load_config, train

__version__ = "0.1.0"
