"""Exception hierarchy with machine-parsable categories for the CLI."""


class SplatdiffError(Exception):
    """Base error. `category` is a stable one-token identifier."""

    category = "internal"


class InvalidInputError(SplatdiffError):
    category = "invalid-input"


class ShapeMismatchError(SplatdiffError):
    category = "shape-mismatch"


class UnfittedNormalizerError(SplatdiffError):
    category = "unfitted-normalizer"


class ConfigError(SplatdiffError):
    category = "invalid-config"


class DigestMismatchError(SplatdiffError):
    category = "digest-mismatch"


class MissingArtifactError(SplatdiffError):
    category = "missing-file"


class DataError(SplatdiffError):
    category = "data"
