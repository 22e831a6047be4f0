class DimensionError(ValueError):
    """Image size not tiled by the patch/merge geometry."""


class ShapeError(ValueError):
    pass


class EmptyRegionError(ValueError):
    """A mask or box selects no pixels, so no patch can reference it."""


class VocabularyRangeError(IndexError):
    """A token id lies outside the vocabulary of the paired image."""


class InvalidMaskError(ValueError):
    """The supervision mask hides a ground-truth token."""


class TaskError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass
