"""Object-level map localization on 2D landmark maps."""

__version__ = "0.1.0"

from .errors import (
    BudgetExceededError,
    DatasetSchemaError,
    DegenerateConfigurationError,
    FlatlocError,
    IncomparableReportsError,
    IntegrityError,
    InvalidDepthError,
    PreconditionError,
    RefinementDidNotConvergeError,
    TooFewObjectsError,
    UnmatchableError,
)
from .geometry import SimilarityTransform2D, procrustes_align
from .matching import brute_force_localize, neighbor_similarity, similarity_field
from .model import ClassRegistry, LocalMap, ObjectLandmark, Pose3DoF, ReferenceMap, SemanticClass
