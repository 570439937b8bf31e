"""Exception types raised across the pipeline."""


class CVDRiskError(Exception):
    """Base class for all pipeline errors."""


# --- volume / geometry ---

class DegenerateVolume(CVDRiskError):
    """Volume too small along some axis for the requested operation."""


class EmptyBox(CVDRiskError):
    """Crop box has no voxels after clamping."""


class ShapeMismatch(CVDRiskError):
    """Array shape differs from what the operation requires."""


# --- detection ---

class NoPositiveSamples(CVDRiskError):
    """Detector training set contains no slice with a ground-truth box."""


class NoDetections(CVDRiskError):
    """No slice detection survived the score threshold."""


# --- model / training ---

class InvalidConfig(CVDRiskError):
    """Model or training configuration violates its constraints."""


class EmptyDataset(CVDRiskError):
    """Training requires a nonempty dataset with both classes present."""


class EmptyList(CVDRiskError):
    """Operation requires a nonempty list."""


class UntrainedModel(CVDRiskError):
    """Model has not been trained."""


class AttentionDisabled(CVDRiskError):
    """Attention maps requested from a model built without attention."""


# --- cohort ---

class MalformedCode(CVDRiskError):
    """String does not parse as an ICD-10 code."""


class TooFewSubjects(CVDRiskError):
    """Not enough subjects to form the requested partition."""


class NoValidExam(CVDRiskError):
    """Subject has no valid exam with at least one usable volume."""


# --- statistics ---

class SingleClass(CVDRiskError):
    """Scored cohort must contain both positive and negative labels."""


class DegenerateCounts(CVDRiskError):
    """Class counts too small for the requested interval."""


class UnachievablePPV(CVDRiskError):
    """No score threshold reaches the requested positive predictive value."""


class LengthMismatch(CVDRiskError):
    """Parallel input lists differ in length."""


class EmptyInput(CVDRiskError):
    """Operation requires nonempty input."""


class EmptyGroup(EmptyInput):
    """Two-group test received an empty group."""


class ZeroVariance(CVDRiskError):
    """Correlation input has no variance."""


# --- calcium scoring ---

class MissingSpacing(CVDRiskError):
    """Volume lacks the physical spacing needed for area/score computation."""


class OutOfRange(CVDRiskError):
    """Scalar input outside its documented domain."""


# --- phantom ---

class InvalidSpec(CVDRiskError):
    """Phantom specification is geometrically or physically inconsistent."""


class InvalidParams(CVDRiskError):
    """Cohort generation parameters out of range."""


# --- I/O ---

class IOFailure(CVDRiskError):
    """File could not be read or written."""


class UsageError(CVDRiskError):
    """Bad command-line usage or malformed input data (exit code 2)."""
