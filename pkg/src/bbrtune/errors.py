"""Exception types shared across the package."""


class BbrTuneError(Exception):
    """Base class for package errors."""


class ConfigError(BbrTuneError):
    """Invalid scenario, checkpoint, or CLI configuration (exit code 2)."""


class ScenarioError(ConfigError):
    """Scenario file failed validation."""


class CheckpointError(ConfigError):
    """Checkpoint file missing, corrupt, or shape-mismatched."""


class SimulationError(BbrTuneError):
    """Runtime failure inside the simulator or training loop (exit code 3)."""
