"""Exception types shared across the toolkit."""

from __future__ import annotations


class MvPoseKitError(Exception):
    """Base class for all toolkit errors."""


class DegenerateDepth(MvPoseKitError):
    """A point lies on (or numerically at) a camera's principal plane."""


class TopologyMismatch(MvPoseKitError):
    """Joint counts or skeleton topologies disagree between inputs."""


class FrameMismatch(MvPoseKitError):
    """Frame indices disagree between inputs that must be synchronized."""


class DimensionMismatch(MvPoseKitError):
    """Array shapes or parameter dimensions are inconsistent."""


class NoValidTargets(MvPoseKitError):
    """Every target joint is invalid; a joint loss cannot be formed."""


class NoValidJoints(MvPoseKitError):
    """No valid joints remain after masking; a metric cannot be formed."""


class DegenerateConfiguration(MvPoseKitError):
    """Point sets are collinear or coincident; alignment is ambiguous."""


class EmptySequence(MvPoseKitError):
    """A pose sequence with zero frames was supplied."""


class EmptyInput(MvPoseKitError):
    """An input collection that must be non-empty is empty."""


class NonFiniteLoss(MvPoseKitError):
    """A loss or gradient evaluated to NaN or infinity."""


class ConfigError(MvPoseKitError):
    """Invalid configuration values (CLI exit code 2)."""


class InputFileError(MvPoseKitError):
    """Missing or malformed input file (CLI exit code 3)."""
