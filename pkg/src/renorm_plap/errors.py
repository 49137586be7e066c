class SolverError(RuntimeError):
    pass


class NonConvergence(SolverError):
    def __init__(self, residual: float, iterations: int, step: int | None = None):
        self.residual = residual
        self.iterations = iterations
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(
            f"Newton did not converge{where}: residual {residual:.3e} "
            f"after {iterations} iterations (reduce dt or increase eps)"
        )


class OffGrid(ValueError):
    pass


class InadmissiblePair(ValueError):
    pass


class InadmissibleZ(ValueError):
    pass


class MismatchedCoupling(ValueError):
    pass


class ConfigError(ValueError):
    pass
