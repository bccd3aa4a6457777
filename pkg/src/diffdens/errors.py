"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class SingularKernelError(InvalidArgumentError):
    """Transition kernel requested at s <= 0 where its std collapses to zero."""


class SchemaError(ValueError):
    """A config or data file does not match its documented schema.

    ``location`` points at the offending field (JSON path) or line (CSV).
    """

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{message} (at {location})" if location else message)


class DivergedSamplerError(RuntimeError):
    """Generative SDE sampler produced a non-finite state."""

    def __init__(self, step_index: int):
        self.step_index = step_index
        super().__init__(f"sampler state became non-finite at step {step_index}")


class DivergedTrainingError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss in epoch {epoch}, batch {batch}")


class DegenerateEstimateError(RuntimeError):
    """Too many Monte-Carlo throws were rejected as non-finite."""

    def __init__(self, n_rejected: int, n_throws: int):
        self.n_rejected = n_rejected
        self.n_throws = n_throws
        super().__init__(
            f"{n_rejected}/{n_throws} throws rejected (> 0.1% tolerated)"
        )


class MaxStepsError(RuntimeError):
    """Adaptive ODE solver exhausted its step budget."""

    def __init__(self, max_steps: int, s_reached: float):
        self.max_steps = max_steps
        self.s_reached = s_reached
        super().__init__(f"solver exceeded {max_steps} steps at s={s_reached:.6g}")


class DivergedSolverError(RuntimeError):
    """ODE state became non-finite during integration."""

    def __init__(self, s_location: float):
        self.s_location = s_location
        super().__init__(f"solver state became non-finite near s={s_location:.6g}")


class NoDataError(ValueError):
    """A plotting or summary operation received an empty input."""
