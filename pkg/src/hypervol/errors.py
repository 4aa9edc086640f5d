"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the operation's documented domain."""


class InvariantError(RuntimeError):
    """An internal data invariant was found violated."""
