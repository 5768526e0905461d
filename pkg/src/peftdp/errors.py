"""Error taxonomy shared across the package.

Contract violations (bad shapes, out-of-range labels, infeasible privacy
budgets) raise ContractError; malformed files and containers raise
FormatError. The CLI maps these to exit codes 1 and 2.
"""


class ContractError(Exception):
    """A caller violated an operation's precondition or an invariant broke."""


class NonFiniteError(ContractError):
    """A forward operation produced NaN/Inf from finite inputs."""


class FormatError(Exception):
    """A file or byte container is malformed (bad magic, truncation, bad JSONL)."""
