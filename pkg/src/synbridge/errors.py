"""Exception hierarchy.

Every error carries a short machine-readable ``category`` so the CLI can
print a single parseable line on failure.
"""


class SynBridgeError(Exception):
    category = "Error"


class ZeroNorm(SynBridgeError, ValueError):
    category = "ZeroNorm"


class SupportMismatch(SynBridgeError, ValueError):
    category = "SupportMismatch"


class ShapeMismatch(SynBridgeError, ValueError):
    category = "ShapeMismatch"


DimMismatch = ShapeMismatch


class NonFinite(SynBridgeError, ValueError):
    category = "NonFinite"


class NoCachedForward(SynBridgeError, RuntimeError):
    category = "NoCachedForward"


class BadMagic(SynBridgeError, ValueError):
    category = "BadMagic"


class VersionUnsupported(SynBridgeError, ValueError):
    category = "VersionUnsupported"


class CorruptPayload(SynBridgeError, ValueError):
    category = "CorruptPayload"


class LabelOutOfRange(SynBridgeError, ValueError):
    category = "LabelOutOfRange"


class InsufficientSamples(SynBridgeError, ValueError):
    category = "InsufficientSamples"


class InsufficientCategories(SynBridgeError, ValueError):
    category = "InsufficientCategories"


class InsufficientPairs(SynBridgeError, ValueError):
    category = "InsufficientPairs"


class MissingBank(SynBridgeError, FileNotFoundError):
    category = "MissingBank"


class MissingCheckpoint(SynBridgeError, FileNotFoundError):
    category = "MissingCheckpoint"


class MissingDescriptor(SynBridgeError, KeyError):
    category = "MissingDescriptor"

    def __str__(self):
        return Exception.__str__(self)


class EmptyName(SynBridgeError, ValueError):
    category = "EmptyName"


class ProviderTimeout(SynBridgeError, TimeoutError):
    category = "ProviderTimeout"


class ProviderError(SynBridgeError, RuntimeError):
    category = "ProviderError"

    def __init__(self, status, body=""):
        self.status = status
        self.body = body[:200]
        super().__init__(f"provider returned status {status}: {self.body}")


class ConfigInvalid(SynBridgeError, ValueError):
    category = "ConfigInvalid"


class MissingArtifact(SynBridgeError, FileNotFoundError):
    category = "MissingArtifact"
