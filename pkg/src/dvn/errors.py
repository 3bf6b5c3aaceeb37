"""Exception types shared across modules."""


class TrainingError(RuntimeError):
    """Training diverged; ``epoch`` is where, ``last_good`` the last finite model if one exists."""

    def __init__(self, message: str, epoch: int, last_good=None):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
        self.last_good = last_good


class NumericError(ArithmeticError):
    """A loss or score term went non-finite."""
