"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid configuration: unknown key, bad value, missing column, bad generator spec."""


class DataError(Exception):
    """Problem with input data that is not a configuration mistake."""


class EmptyCorpusError(DataError):
    """Filtering removed everything; carries per-stage removal counts."""

    def __init__(self, message, stage_counts=None):
        super().__init__(message)
        self.stage_counts = dict(stage_counts or {})


class SamplingError(DataError):
    """No eligible example can be drawn from the corpus."""


class ShapeError(Exception):
    """Operands of an op are shape-incompatible; names the op and the shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class ContractError(Exception):
    """A documented precondition or API contract was violated."""


class BoundsError(ContractError):
    """An index fell outside a lookup table; names the table and the index."""

    def __init__(self, table, index, size):
        self.table = table
        self.index = index
        self.size = size
        super().__init__(f"index {index} out of range for table '{table}' of size {size}")


class CheckpointError(Exception):
    """Checkpoint file is corrupt, truncated, or inconsistent with its manifest."""
