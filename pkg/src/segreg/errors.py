"""Error types shared across the package."""


class ContractViolation(ValueError):
    """An input violated a documented precondition (shape, range, cardinality).

    The CLI maps this to a nonzero exit code distinct from unexpected failures.
    """
