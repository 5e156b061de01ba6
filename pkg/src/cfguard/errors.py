class DataError(ValueError):
    """Input data or artifact is malformed or inconsistent."""


class ArtifactError(DataError):
    """A JSON artifact is missing, unreadable or has the wrong schema version."""

    def __init__(self, path, message, expected_version=None):
        self.path = str(path)
        self.expected_version = expected_version
        suffix = f" (expected schema version {expected_version})" if expected_version is not None else ""
        super().__init__(f"{path}: {message}{suffix}")
