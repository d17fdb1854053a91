"""Longitudinal cognitive-trajectory features for time-to-event prognosis.

An LSTM autoencoder compresses variable-length visit sequences into fixed-size
latent vectors that feed a Cox proportional-hazards model evaluated by
concordance index. Includes a calibrated synthetic cohort generator and a CLI
(`trajsurv generate|run|sweep|report`) reproducing the experimental protocol.
"""

from .autoencoder import (AutoencoderModel, LatentFeatures, LstmAutoencoder, TrainConfig,
                          decode, encode, extract_features, init_autoencoder, load_model,
                          reconstruction_loss, save_model, train)
from .cohort import (GenConfig, NormStats, SubjectTrajectory, VisitRecord,
                     compute_norm_stats, generate_cohort, generate_cohort_with_latents,
                     load_cohort, normalize, save_cohort, split_cohort, truncate_visits)
from .exceptions import ConvergenceError, DataFormatError
from .survival import (CovariateSpec, CoxPH, SurvivalRecord, bootstrap_cindex_diff,
                       concordance_index, cox_grad_hess, cox_nll, records_to_arrays)

__version__ = "0.1.0"

__all__ = [
    "AutoencoderModel", "LatentFeatures", "LstmAutoencoder", "TrainConfig",
    "decode", "encode", "extract_features", "init_autoencoder", "load_model",
    "reconstruction_loss", "save_model", "train",
    "GenConfig", "NormStats", "SubjectTrajectory", "VisitRecord",
    "compute_norm_stats", "generate_cohort", "generate_cohort_with_latents",
    "load_cohort", "normalize", "save_cohort", "split_cohort", "truncate_visits",
    "ConvergenceError", "DataFormatError",
    "CovariateSpec", "CoxPH", "SurvivalRecord", "bootstrap_cindex_diff",
    "concordance_index", "cox_grad_hess", "cox_nll", "records_to_arrays",
    "__version__",
]
