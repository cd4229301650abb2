"""Exception taxonomy for soclab.

Every failure mode that callers are expected to handle has its own class so the
CLI can map them onto exit codes (config errors -> 2, numerical aborts -> 3).
"""


class SoclabError(Exception):
    """Base class for all soclab errors."""


class ConfigError(SoclabError):
    """Bad configuration: unknown setting/loss names, malformed config files."""


class ContractError(SoclabError):
    """An operation was called with arguments violating its contract."""


class SimulationDivergedError(SoclabError):
    """A rollout produced a non-finite state.

    Carries the first offending (trajectory, step) pair.
    """

    def __init__(self, trajectory: int, step: int):
        self.trajectory = int(trajectory)
        self.step = int(step)
        super().__init__(
            f"non-finite state first encountered at trajectory {trajectory}, step {step}"
        )


class DegenerateWeightsError(SoclabError):
    """Every importance weight in the batch saturated (overflowed to +inf)."""


class DegenerateOracleError(SoclabError):
    """A Monte Carlo oracle produced all-zero weights; estimate undefined."""


class CorruptModelError(SoclabError):
    """Network parameters contain non-finite entries."""


class ResourceError(SoclabError):
    """A computation would exceed the configured memory ceiling."""


class HorizonError(SoclabError):
    """Riccati integration blew up; the horizon is too long for these coefficients."""


class ResolutionError(SoclabError):
    """A PDE solve failed its positivity check; the grid needs refinement."""


class SplineError(SoclabError):
    """A warm-start spline matrix is singular or ill-conditioned."""


class WarmStartError(SoclabError):
    """Warm-start training diverged; caller may fall back to a zero warm start."""


class CheckpointError(SoclabError):
    """A checkpoint file is unreadable or structurally inconsistent."""


class RunAbortedError(SoclabError):
    """Training aborted after too many consecutive failed steps."""
