"""Exception types shared across the pipeline."""


class SceneFlowError(Exception):
    """Base class for every error raised by this package."""


class InvalidInput(SceneFlowError):
    """Input data violates a precondition (non-finite coordinate, bad pose, ...)."""


class InvalidConfig(SceneFlowError):
    """A configuration value is out of its legal range."""


class ShapeError(SceneFlowError):
    """Array dimensions do not line up with the operation's contract."""


class RangeError(SceneFlowError):
    """A value exceeds the representable range (e.g. Morton coordinate overflow)."""


class InvalidPermutation(SceneFlowError):
    """A stored permutation pair is not a bijection / inverse pair."""


class AlignmentError(SceneFlowError):
    """Two sparse tensors that must share an active set do not."""


class EmptyInput(SceneFlowError):
    """An operation that needs at least one element received none."""


class StateError(SceneFlowError):
    """Required recorded state (e.g. forward intermediates) is missing."""


class NumericError(SceneFlowError):
    """A non-finite value appeared mid-computation.

    ``index`` localizes the failure (token or point index) when known.
    """

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)
        self.index = index


class FormatError(SceneFlowError):
    """A binary file is malformed. ``offset`` is the byte position of the defect."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
