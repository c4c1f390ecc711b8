"""Custom exceptions for uniground."""


class UnigroundError(Exception):
    """Base exception for all grounding errors."""

    exit_code: int = 1


class InputError(UnigroundError):
    """Invalid input arguments, scene data or configuration."""

    exit_code: int = 2


class SceneLoadError(InputError):
    """A scene directory is missing files or holds corrupt data."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class MissingPoseError(SceneLoadError):
    """The pose file of a frame is absent."""

    def __init__(self, frame_id: int, path: str | None = None):
        self.frame_id = frame_id
        super().__init__(f"MissingPose({frame_id})", path=path)


class MissingFrameFileError(SceneLoadError):
    """A color or depth image of a frame is absent."""

    def __init__(self, frame_id: int, kind: str, path: str | None = None):
        self.frame_id = frame_id
        self.kind = kind
        super().__init__(f"Missing{kind.capitalize()}({frame_id})", path=path)


class PoseError(SceneLoadError):
    """A pose matrix is not a rigid camera-to-world transform."""


class EmptySelectionError(InputError):
    """A geometric operation received an empty point subset."""


class TooFewPointsError(InputError):
    """The cloud has fewer points than the neighbourhood size."""

    def __init__(self, point_count: int, required: int):
        self.point_count = point_count
        self.required = required
        super().__init__(f"TooFewPoints: {point_count} points, need at least {required}")


class ScheduleError(InputError):
    """Invalid merge threshold schedule."""


class ConfigError(InputError):
    """Invalid configuration file or values."""


class SynthesisError(InputError):
    """A synthetic scene specification cannot be satisfied."""


class AblationError(InputError):
    """Invalid ablation request."""


class ProviderError(UnigroundError):
    """A model provider failed; raised only through the gateway."""

    exit_code: int = 3

    def __init__(self, message: str, provider: str | None = None):
        self.provider = provider
        super().__init__(f"[{provider}] {message}" if provider else message)


class ProviderTimeout(ProviderError):
    """The provider did not answer within the configured timeout."""


class BadStatus(ProviderError):
    """The provider answered with a non-success HTTP status."""

    def __init__(self, code: int, provider: str | None = None):
        self.code = code
        super().__init__(f"BadStatus({code})", provider=provider)


class MalformedResponse(ProviderError):
    """The provider answer does not match the wire schema."""


class PayloadTooLarge(ProviderError):
    """The encoded request exceeds the configured payload limit."""

    def __init__(self, size: int, limit: int, provider: str | None = None):
        self.size = size
        self.limit = limit
        super().__init__(f"payload of {size} bytes exceeds {limit}", provider=provider)


class OutputError(UnigroundError):
    """Failed to write an artifact or report."""

    exit_code: int = 5
