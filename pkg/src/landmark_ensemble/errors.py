"""Exception types shared across the pipeline."""


class ConvergenceError(RuntimeError):
    """Power iteration failed to reach the requested tolerance."""

    def __init__(self, residual: float, iterations: int, tol: float):
        self.residual = residual
        self.iterations = iterations
        self.tol = tol
        super().__init__(
            f"equilibrium iteration did not converge: residual {residual:.3e} "
            f"after {iterations} iterations (tol {tol:.3e})"
        )


class FormatError(ValueError):
    """A binary or text artifact file is malformed.

    `offset` is the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")
