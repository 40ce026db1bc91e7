class ConfigurationError(ValueError):
    """Invalid user-supplied parameters or settings."""


class InvariantError(ValueError):
    """A structural invariant of a data object was violated."""


class SimulationError(RuntimeError):
    def __init__(self, msg, path=None, node=None):
        super().__init__(msg if path is None else f"{msg} (path {path}, node {node})")
        self.path = path
        self.node = node


class RegressionError(RuntimeError):
    def __init__(self, msg, node=None):
        super().__init__(msg if node is None else f"{msg} at node {node}")
        self.node = node


class SolverError(RuntimeError):
    pass


class DivergenceError(SolverError):
    def __init__(self, msg, distances=None):
        super().__init__(msg)
        self.distances = list(distances or [])


class NonlinearSolveError(RuntimeError):
    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = list(residuals or [])


class CFLError(ValueError):
    def __init__(self, required_nt):
        super().__init__(f"explicit step violates CFL bound; need nt >= {required_nt}")
        self.required_nt = required_nt
