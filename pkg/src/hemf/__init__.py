"""Heterogeneous matrix factorization.

Matrix completion where the user and item factor vectors are drawn from two
coupled Dirichlet-process mixtures, inferred by batch coordinate-ascent
variational Bayes, a streaming variant with component spawning and merging,
and empirical-Bayes hyperparameter adaptation.  A point-estimate SGD
factorizer is included as a streaming baseline.
"""

from .baselines import SgdModel, fit_bpmf, fit_sgd, sgd_process_chunk
from .batch import (FitConfig, fit_batch, run_sweep, update_community,
                    update_factor, update_membership, update_sticks)
from .checkpoint import load_checkpoint, load_checkpoint_full, save_checkpoint
from .data import (RunLogger, SplitSpec, chunk_stream, parse_chunk_stream,
                   parse_ratings, rmse, split_dataset)
from .elbo import compute_elbo, elbo_terms
from .empirical import (run_evb_pass, update_base_means, update_concentration,
                        update_lambda0, update_sigma2, update_wishart_hypers)
from .errors import (CheckpointError, DataFormatError, DegenerateSplitError,
                     DivergenceError, HemfError, NonFiniteError,
                     NotPositiveDefiniteError)
from .model import (CommunityPosterior, FactorPosterior, GroundTruth,
                    Hyperparameters, MembershipPosterior, ModelState,
                    SideState, SparseRatings, StickPosterior, init_state,
                    make_rng, predict_entry, predict_pairs, sample_from_model)
from .online import (OnlineConfig, RatingChunk, SideDeltas, accumulate_deltas,
                     merge_communities, online_update_factor,
                     online_update_globals, online_update_membership,
                     process_chunk, stream_fit)
from .special import digamma, multivariate_digamma, pd_inverse_logdet

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "CommunityPosterior", "DataFormatError",
    "DegenerateSplitError", "DivergenceError", "FactorPosterior", "FitConfig",
    "GroundTruth", "HemfError", "Hyperparameters", "MembershipPosterior",
    "ModelState", "NonFiniteError", "NotPositiveDefiniteError", "OnlineConfig",
    "RatingChunk", "RunLogger", "SgdModel", "SideDeltas", "SideState",
    "SparseRatings", "SplitSpec", "StickPosterior", "accumulate_deltas",
    "chunk_stream", "compute_elbo", "digamma", "elbo_terms", "fit_batch",
    "fit_bpmf", "fit_sgd", "init_state", "load_checkpoint",
    "load_checkpoint_full", "make_rng", "merge_communities",
    "multivariate_digamma", "online_update_factor", "online_update_globals",
    "online_update_membership", "parse_chunk_stream", "parse_ratings",
    "pd_inverse_logdet", "predict_entry", "predict_pairs", "process_chunk",
    "rmse", "run_evb_pass", "run_sweep", "sample_from_model", "save_checkpoint",
    "sgd_process_chunk", "split_dataset", "stream_fit", "update_base_means",
    "update_community", "update_concentration", "update_factor",
    "update_lambda0", "update_membership", "update_sigma2", "update_sticks",
    "update_wishart_hypers",
]
