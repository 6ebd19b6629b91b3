"""Services package for longview."""
from services.alignment_service import AlignmentService
from services.cohort_service import CohortService
from services.evaluation_service import EvaluationService
from services.phantom_service import PhantomService
from services.training_service import TrainingService

__all__ = [
    "AlignmentService",
    "CohortService",
    "EvaluationService",
    "PhantomService",
    "TrainingService",
]
