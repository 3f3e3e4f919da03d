"""Exception taxonomy shared across the package."""


class SplatSimError(Exception):
    """Base class; carries a stable machine-readable category."""

    category = "error"


class SceneFormatError(SplatSimError):
    """Manifest or blob does not conform to the documented schema."""

    category = "schema"

    def __init__(self, message: str, field_path: str = ""):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


class MissingFileError(SplatSimError):
    category = "missing-file"


class BlobChecksumError(SplatSimError):
    category = "blob-checksum-mismatch"


class PlyImportError(SplatSimError):
    category = "ply-import"


class EditError(SplatSimError):
    category = "edit"


class RenderError(SplatSimError):
    category = "render"


class FitError(SplatSimError):
    category = "fit"


class AlignmentError(SplatSimError):
    category = "alignment"


class OracleProtocolError(SplatSimError):
    category = "oracle-protocol"


class DiffusionError(SplatSimError):
    category = "diffusion"


class MetricError(SplatSimError):
    category = "metric"
