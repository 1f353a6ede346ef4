"""Exception types shared across the package."""


class ConfigError(Exception):
    """Raised when a cluster config is malformed or violates an invariant.

    ``problems`` carries one message per violation so callers can report
    everything at once instead of failing on the first field.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class PlanningError(Exception):
    """Raised when no feasible layer assignment exists or planning cannot proceed."""
