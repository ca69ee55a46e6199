"""
FlowAug - Services Module
"""

from .augmentation_service import AugmentationService, get_augmentation_service
from .classifier_service import ClassifierService, get_classifier_service
from .dataset_service import DatasetService, get_dataset_service
from .experiment_service import ExperimentService, get_experiment_service
from .flow_training_service import FlowTrainingService, get_flow_training_service
from .verification_service import VerificationService

__all__ = [
    'AugmentationService',
    'get_augmentation_service',
    'ClassifierService',
    'get_classifier_service',
    'DatasetService',
    'get_dataset_service',
    'ExperimentService',
    'get_experiment_service',
    'FlowTrainingService',
    'get_flow_training_service',
    'VerificationService'
]
