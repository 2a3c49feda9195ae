"""Exception types raised across dbarf."""

from typing import Optional


class ShapeError(ValueError):
    """Operand shapes do not fit a primitive's signature."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        listed = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {listed}")


class TapeStateError(RuntimeError):
    pass


class NonFiniteError(ValueError):
    """A numeric input contains NaN or inf."""

    def __init__(self, op: str, index):
        self.op = op
        self.index = index
        super().__init__(f"{op}: non-finite value at index {index}")


class DomainError(ValueError):
    pass


class IllConditionedLogError(ValueError):
    pass


class DegenerateViewError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


class UndefinedLossError(ValueError):
    pass


class OptimizerDivergedError(RuntimeError):
    """A recurrent update produced NaN or inf."""

    def __init__(self, iteration: int, what: str = "head output"):
        self.iteration = iteration
        super().__init__(f"Pose/depth optimizer diverged at iteration {iteration}: "
                         f"non-finite {what}")


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    def __init__(self, path: str, block: str, reason: str = "truncated"):
        self.block = block
        super().__init__(f"Corrupt checkpoint {path}: {reason} in block '{block}'")


class CheckpointVersionError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(
            f"Checkpoint architecture hash {found} does not match config hash {expected}"
        )


class SplitViolationError(RuntimeError):
    pass


class TrainingHaltedError(RuntimeError):
    def __init__(self, step: int, reason: str, checkpoint: Optional[str] = None):
        self.step = step
        self.checkpoint = checkpoint
        where = f", last good state saved to {checkpoint}" if checkpoint else ""
        super().__init__(f"Training halted at step {step}: {reason}{where}")
