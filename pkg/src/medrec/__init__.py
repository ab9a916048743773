"""Medication recommendation from longitudinal EHR visits.

Set-attention visit encoding, a recurrent attention block over visits, a
DDI-penalised objective and a curriculum-scaled Adam optimizer, all on a small
numpy reverse-mode autodiff engine.
"""

from .config import RunConfig, build_config
from .data import CodeVocabulary, EHRDataset, PatientRecord, Visit, load_dataset, split_dataset
from .model import ModelConfig, MedRecModel

__version__ = "0.1.0"

__all__ = [
    "CodeVocabulary", "EHRDataset", "ModelConfig", "PatientRecord", "RunConfig",
    "MedRecModel", "Visit", "build_config", "load_dataset", "split_dataset",
]
