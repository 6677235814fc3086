from pathlib import Path


class KGError(Exception):
    pass


class ConfigError(KGError, ValueError):
    pass


class DimensionError(KGError, ValueError):
    pass


class DataError(KGError):
    pass


class TripleParseError(DataError):
    def __init__(self, path: Path | str, line_no: int, reason: str):
        self.path, self.line_no, self.reason = Path(path), line_no, reason
        super().__init__(f"{path}:{line_no}: {reason}")


class VocabularyError(DataError):
    def __init__(self, name: str, kind: str, where: str = ""):
        self.name, self.kind = name, kind
        suffix = f" ({where})" if where else ""
        super().__init__(f"unknown {kind} {name!r}{suffix}")


class DuplicateTripleError(DataError):
    def __init__(self, path: Path | str, line_nos: list[int]):
        self.path, self.line_nos = Path(path), line_nos
        shown = ", ".join(str(n) for n in line_nos[:10])
        more = f" (+{len(line_nos) - 10} more)" if len(line_nos) > 10 else ""
        super().__init__(f"{path}: duplicate triple on line(s) {shown}{more}")


class SamplerError(KGError):
    pass


class TrainingDivergedError(KGError):
    def __init__(self, epoch: int, detail: str):
        self.epoch = epoch
        super().__init__(f"non-finite values at epoch {epoch}: {detail}")


class SpectralError(KGError):
    pass


class PreconditionError(SpectralError):
    pass


class DecompositionError(SpectralError):
    def __init__(self, message: str, residual: float):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class ModelFormatError(KGError):
    pass
