"""Exception hierarchy.

Every error carries a short ``kind`` string; the experiment harness records it
in failure rows so sweeps can be filtered by what went wrong.
"""


class DPFLError(Exception):
    kind = "error"


class CaseFormatError(DPFLError, ValueError):
    kind = "case-format"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InvalidCaseError(DPFLError, ValueError):
    kind = "invalid-case"


class SchemaError(DPFLError, ValueError):
    kind = "schema"


class ConvergenceError(DPFLError, RuntimeError):
    kind = "non-convergence"


class StallError(ConvergenceError):
    kind = "smo-stall"

    def __init__(self, message, violation):
        self.violation = violation
        super().__init__(f"{message} (max KKT violation {violation:.3e})")


class SingularMatrixError(DPFLError, ArithmeticError):
    kind = "singular"


class RankDeficientError(DPFLError, ValueError):
    kind = "rank-deficient"

    def __init__(self, message, rank=None, n_cols=None):
        self.rank = rank
        self.n_cols = n_cols
        super().__init__(message)


class IllConditionedError(DPFLError, ArithmeticError):
    kind = "ill-conditioned"

    def __init__(self, message, condition_number):
        self.condition_number = condition_number
        super().__init__(f"{message} (condition number {condition_number:.3e})")


class ClusterError(DPFLError, ValueError):
    kind = "underdetermined-cluster"


class OscillationError(ConvergenceError):
    kind = "oscillation"


class InfeasibleError(DPFLError, ValueError):
    kind = "infeasible"


class NodeBudgetError(DPFLError, RuntimeError):
    kind = "node-budget"

    def __init__(self, message, incumbent=None, gap=None):
        self.incumbent = incumbent
        self.gap = gap
        super().__init__(f"{message} (incumbent={incumbent}, gap={gap})")


class SamplingError(DPFLError, RuntimeError):
    kind = "sampling"


class DegenerateDataError(DPFLError, ValueError):
    kind = "zero-variance"
