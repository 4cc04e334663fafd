"""Exception hierarchy. Each subclass maps to a distinct CLI exit code."""


class CrackScanError(Exception):
    category = "error"
    exit_code = 1


class ConfigurationError(CrackScanError):
    category = "config"
    exit_code = 3


class RegistryError(CrackScanError):
    category = "registry"
    exit_code = 4


class InsufficientSamplesError(CrackScanError):
    category = "data"
    exit_code = 5


class WeightsUnavailableError(CrackScanError):
    category = "weights"
    exit_code = 6


class ArtifactError(CrackScanError):
    category = "artifact"
    exit_code = 7


class TrainingError(CrackScanError):
    category = "training"
    exit_code = 8


class ShapeError(CrackScanError, ValueError):
    category = "shape"
    exit_code = 9


class PreprocessMismatchError(CrackScanError):
    category = "preprocess"
    exit_code = 10
