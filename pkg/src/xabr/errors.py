"""Error types that map to CLI exit codes."""


class ConfigError(Exception):
    """Bad configuration file or schema violation (exit code 2)."""


class DataError(Exception):
    """Corpus parse or schema failure (exit code 3)."""


class CheckpointFormatError(Exception):
    """Malformed or truncated checkpoint file (exit code 4)."""
