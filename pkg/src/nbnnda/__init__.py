"""NBNN image-to-class classification and learning-free source-descriptor transfer."""
from .adaptation import (TransferSpec, adapted_counts, build_adapted_classifier, derive_seed, merged_pools,
                         sample_source, transfer_sweep)
from .nbnn import Classifier, SupportSet, classify, classify_batch, df2c, di2c
from .nn_index import NNIndex, NNResult
from .types import (ClassificationResult, ClassPool, DescriptorBag, DomainDataset, LabelSetMismatch,
                    NBNNError, ValidationError, pool_by_class, validate_dataset)

__version__ = "0.1.0"

__all__ = [
    "TransferSpec", "adapted_counts", "build_adapted_classifier", "derive_seed", "merged_pools", "sample_source",
    "transfer_sweep", "Classifier", "SupportSet", "classify", "classify_batch", "df2c", "di2c", "NNIndex",
    "NNResult", "ClassificationResult", "ClassPool", "DescriptorBag", "DomainDataset", "LabelSetMismatch",
    "NBNNError", "ValidationError", "pool_by_class", "validate_dataset",
]
