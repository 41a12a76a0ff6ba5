"""Exception types shared across the package."""


class LayerWarpError(Exception):
    """Base class for all layerwarp errors."""


class DegenerateWarpError(LayerWarpError):
    """Control points or sampled correspondences cannot define a warp
    (collinear, duplicated, or constant/folded input)."""


class WarpSolveError(LayerWarpError):
    """The warp linear system is singular or too ill-conditioned to trust."""


class PipelineError(LayerWarpError):
    """A propagation stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class GuidanceContractError(LayerWarpError):
    """A guidance provider violated its contract (shape, finiteness, or wire
    protocol failure)."""


class OptimizationDivergedError(LayerWarpError):
    """The objective became non-finite; carries the iteration number."""

    def __init__(self, iteration: int, message: str = "non-finite loss"):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
