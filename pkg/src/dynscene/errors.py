"""Exception hierarchy shared by every stage of the pipeline."""


class DynSceneError(Exception):
    """Base class; the CLI maps these to a nonzero exit code."""


class DimensionMismatch(DynSceneError):
    pass


class EmptyCloud(DynSceneError):
    pass


class DegenerateDepth(DynSceneError):
    pass


class UnknownPreset(DynSceneError):
    pass


class AllHoles(DynSceneError):
    pass


class UnknownKind(DynSceneError):
    pass


class BadMagic(DynSceneError):
    pass


class TruncatedFile(DynSceneError):
    pass


class NoCoverage(DynSceneError):
    pass


class NonFiniteLoss(DynSceneError):
    pass


class NoCorrespondence(DynSceneError):
    pass


class EmptyValidMask(DynSceneError):
    pass


class SizeMismatch(DynSceneError):
    pass


class EmptyVideo(DynSceneError):
    pass


class EmptyMask(DynSceneError):
    pass


class ImageTooSmall(DynSceneError):
    pass


class EmptyOverlap(DynSceneError):
    pass


class ManifestMismatch(DynSceneError):
    pass
