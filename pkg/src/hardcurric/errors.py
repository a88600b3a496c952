"""Exception types raised across the package."""


class HardcurricError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(HardcurricError, ValueError):
    pass


class DomainError(HardcurricError, ValueError):
    pass


class ContractError(HardcurricError, RuntimeError):
    """A pipeline precondition was violated (wrong stage, missing input, ...)."""


class DegenerateInputError(HardcurricError, ValueError):
    pass


class FormatError(HardcurricError):
    """Bad magic bytes or unsupported version in an on-disk file."""


class IntegrityError(HardcurricError):
    """File contents disagree with their header, manifest, or references."""


class ConfigError(HardcurricError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def read_text(path) -> str:
    """Read a UTF-8 artifact; undecodable bytes are an IntegrityError, not a UnicodeDecodeError."""
    from pathlib import Path
    try:
        return Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise IntegrityError(f"{path}: not valid UTF-8 at byte {e.start}") from None
