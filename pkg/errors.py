"""
errors.py – DepthAug3D
Exception hierarchy shared by every module.

Each error carries an ``exit_code`` so the CLI can map failures to distinct
process exit statuses. Errors about bad input also derive from ValueError,
file-system errors from OSError, so callers may keep catching builtins.
"""


class DepthAugError(Exception):
    """Base class for all toolkit errors."""
    exit_code = 1


# ── Configuration & I/O ──────────────────────────────────────────────────────

class ConfigError(DepthAugError, ValueError):
    exit_code = 2


class IoError(DepthAugError, OSError):
    exit_code = 3


class MissingFile(IoError, FileNotFoundError):
    exit_code = 4


class ParseError(DepthAugError, ValueError):
    exit_code = 5


class VolumeFormatError(ParseError):
    exit_code = 6


class EmptyStore(DepthAugError, RuntimeError):
    exit_code = 7


# ── Volumes ──────────────────────────────────────────────────────────────────

class SingularTransform(DepthAugError, ValueError):
    exit_code = 10


class AllZeroVolume(DepthAugError, ValueError):
    exit_code = 11


# ── Network ──────────────────────────────────────────────────────────────────

class ShapeMismatch(DepthAugError, ValueError):
    exit_code = 20


class DegenerateBatch(DepthAugError, ValueError):
    exit_code = 21


class InvalidSpec(DepthAugError, ValueError):
    exit_code = 22


class CheckpointMismatch(DepthAugError, ValueError):
    exit_code = 23


# ── Data & training ──────────────────────────────────────────────────────────

class EmptySplit(DepthAugError, ValueError):
    exit_code = 30


class DuplicateId(DepthAugError, ValueError):
    exit_code = 31


class TooFewSamples(DepthAugError, ValueError):
    exit_code = 32


class LeakageError(DepthAugError, RuntimeError):
    exit_code = 33


# ── Metrics ──────────────────────────────────────────────────────────────────

class LengthMismatch(DepthAugError, ValueError):
    exit_code = 40


class SingleClass(DepthAugError, ValueError):
    exit_code = 41


class NoPositives(DepthAugError, ValueError):
    exit_code = 42


class DegenerateInput(DepthAugError, ValueError):
    exit_code = 43
