"""
Errors - exception hierarchy shared by every dfloc component
"""

from typing import Optional


class DflocError(Exception):
    """Base class for all dfloc errors."""


class ShapeError(DflocError, ValueError):
    """Operand shapes or axes do not agree."""


class DomainError(DflocError, ArithmeticError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(DflocError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DegeneratePredictionError(ContractError):
    """A predicted vector is too short to be normalized."""


class UnsupportedModeError(DflocError, RuntimeError):
    """The requested operation needs a mode the model was not built with."""


class InfeasibleConfigError(DflocError, ValueError):
    """A scene generation config cannot be realized."""


class ConfigError(DflocError, ValueError):
    """A configuration field failed validation."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericFault(DflocError, ArithmeticError):
    """
    Non-finite values appeared during a computation.

    Carries whatever location information the raising site knows about.
    """

    def __init__(self, message: str, layer: Optional[str] = None,
                 seed_index: Optional[int] = None, round_index: Optional[int] = None,
                 scene_id: Optional[int] = None):
        self.layer = layer
        self.seed_index = seed_index
        self.round_index = round_index
        self.scene_id = scene_id
        where = []
        if layer is not None:
            where.append(f"layer={layer}")
        if scene_id is not None:
            where.append(f"scene={scene_id}")
        if seed_index is not None:
            where.append(f"seed={seed_index}")
        if round_index is not None:
            where.append(f"round={round_index}")
        suffix = f" [{', '.join(where)}]" if where else ""
        super().__init__(message + suffix)

    def located(self, **where) -> "NumericFault":
        """Return a copy of this fault with extra location fields filled in."""
        fields = {
            'layer': self.layer,
            'seed_index': self.seed_index,
            'round_index': self.round_index,
            'scene_id': self.scene_id,
        }
        fields.update({k: v for k, v in where.items() if v is not None})
        base = str(self.args[0]).split(' [')[0] if self.args else 'numeric fault'
        return NumericFault(base, **fields)


class CheckpointError(DflocError, IOError):
    """A checkpoint file could not be written or read."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format version."""


class CheckpointIntegrityError(CheckpointError):
    """A checkpoint section is truncated or fails its checksum."""

    def __init__(self, section: str, message: str):
        self.section = section
        super().__init__(f"section '{section}': {message}")
