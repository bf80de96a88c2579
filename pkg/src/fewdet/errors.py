"""Exception types raised across the package.

Every error carries a message naming the offending argument or field; callers
can rely on the types, not the text.
"""


class FewdetError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FewdetError):
    """Operand shapes are incompatible or violate an op's contract."""


class EmptyInputError(ShapeError):
    """A set that must be nonempty (supports, queries, RoIs) is empty."""


class ParameterError(FewdetError):
    """A plain argument (rate, eps, count, size) is outside its legal range."""


class ConfigError(FewdetError):
    """A configuration value or combination of values is invalid."""


class TapeError(FewdetError):
    """Tape misuse: consumed tape reused, or loss not recorded on the tape."""


class NumericsError(FewdetError):
    """A non-finite value appeared where the contract demands finite math."""


class DeterminismError(FewdetError):
    """Two evaluations that must agree bit-for-bit did not."""


class GenerationError(FewdetError):
    """Synthetic-world generation could not satisfy its constraints."""


class PlacementError(FewdetError):
    """An instance box cannot be placed inside the scene grid."""


class SamplingError(FewdetError):
    """Episode sampling could not satisfy its constraints within its retry bound."""


class BoundsError(FewdetError):
    """A box or index refers outside the grid or array it indexes."""


class ContractError(FewdetError):
    """A cross-field or cross-call precondition was violated."""


class TrainingError(FewdetError):
    """Training aborted; carries the failing step index.

    Attributes:
        step: 0-based iteration at which the failure surfaced.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"step {step}: {message}")
        self.step = step
