from ..electrodes import VocabularyError
from .eegb import ManifestVersionError, TruncatedDataError, read_dataset, read_manifest, write_dataset
from .preprocess import (
    bandpass_hook,
    preprocess,
    resample,
    segment_and_tokenize,
    token_geometry,
    zscore,
    zscore_tokens,
)
from .records import ConfigurationError, DataError, Dataset, EegRecording, EegSample
from .splits import subject_split
from .synthetic import SyntheticSpec, ar2_series, generate_synthetic, is_stationary, yule_walker_acf

__all__ = [
    "ConfigurationError", "DataError", "Dataset", "EegRecording", "EegSample", "ManifestVersionError",
    "SyntheticSpec", "TruncatedDataError", "VocabularyError", "ar2_series", "bandpass_hook",
    "generate_synthetic", "is_stationary", "preprocess", "read_dataset", "read_manifest", "resample",
    "segment_and_tokenize", "subject_split", "token_geometry", "write_dataset", "yule_walker_acf",
    "zscore", "zscore_tokens",
]
