"""Bayesian clustered coefficients regression with mixture-of-finite-mixtures
clustering and auxiliary-covariates-assisted spatial random effects."""

from .kernels import (CovarianceSpec, Location, NumericalError, acac_covariance,
                      distance_matrix, great_circle_distance, mvn_logdensity,
                      mvn_sample, similarity_matrix, weighting_scheme)
from .mfm import (MfmConfig, MixtureWeights, Partition, conditional_k_sample,
                  conditional_weights, dp_stick_breaking, k_prior_pmf,
                  mfm_stick_breaking)
from .model import (CovStructure, Hyperparameters, ModelState, SpatialDataset,
                    log_likelihood, log_prior, residuals)
from .mcmc import ChainConfig, ChainOutput, metropolis_step, run_chain
from .inference import (FitReport, cpo_estimate, hpd_interval, lpml,
                        modal_partition, summarize_chain)
from .simulate import (ReplicateResult, SimDesign, default_sites, design_labels,
                       estimation_metrics, generate_dataset, k_histogram,
                       rand_index, run_replicates)
from .io import load_dataset, save_dataset

__version__ = "0.1.0"
