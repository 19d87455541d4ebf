"""Exception hierarchy shared across the pipeline."""


class BodvwError(Exception):
    """Base class for all errors raised by this package."""


class ManifestError(BodvwError, ValueError):
    pass


class ImageDecodeError(BodvwError, ValueError):
    pass


class ModelError(BodvwError, RuntimeError):
    """The ONNX model is missing, corrupt or lacks a requested tap tensor."""


class FileFormatError(BodvwError, ValueError):
    """A binary or JSON artifact has a bad magic, version, length or checksum."""


class NormalizationError(BodvwError, ValueError):
    pass


class DimensionError(BodvwError, ValueError):
    pass


class CompatibilityError(BodvwError, ValueError):
    """Artifacts were produced under different layers, variants or codebooks."""


class TrainingError(BodvwError, ValueError):
    pass


class ConfigError(BodvwError, ValueError):
    pass
