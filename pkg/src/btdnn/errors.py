"""Structured exceptions shared across the package.

Every error that a caller might want to handle programmatically carries its
payload as attributes, not just formatted text.  The CLI maps these classes
onto its exit codes.
"""


class BtdnnError(Exception):
    """Base class for all package errors."""


class ShapeError(BtdnnError):
    """Array dimensions do not compose."""

    def __init__(self, message, *shapes):
        super().__init__(f"{message}: {' vs '.join(str(s) for s in shapes)}"
                         if shapes else message)
        self.shapes = shapes


class TapeError(BtdnnError):
    """Invalid use of a gradient tape (e.g. backward on an empty tape)."""


class GraphError(BtdnnError):
    """Malformed sequence graph or no accepting path."""


class ConvergenceError(BtdnnError):
    """An iterative routine failed to converge; carries the last residual."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class ConfigError(BtdnnError):
    """Bad configuration value or file."""


class TopologyError(ConfigError):
    """Two models disagree structurally; lists the divergent layers."""

    def __init__(self, message, divergent):
        super().__init__(f"{message}: {sorted(divergent)}")
        self.divergent = set(divergent)


class DataError(BtdnnError):
    """Corpus or data file problem."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, truncated, or of an unknown version."""


class NumericsError(BtdnnError):
    """A non-finite value appeared; names the offending term."""

    def __init__(self, term, value):
        super().__init__(f"non-finite value in term '{term}': {value}")
        self.term = term
        self.value = value


class VerificationError(BtdnnError):
    """A verification suite reported failures."""
