"""Diffusion-multiplier neural operators with variational uncertainty.

The core stack: spectral transforms on the unit torus (:mod:`.spectral`),
a reverse-mode tape over those primitives (:mod:`.autodiff`), operator
blocks and networks (:mod:`.operator`), the variational treatment of the
diffusion times (:mod:`.bayes`), synthetic datasets with verifiable
targets (:mod:`.data`), and calibration metrics (:mod:`.metrics`).
"""

from .bayes import (NoiseModel, PredictiveSamples, TimePrior,
                    VariationalPosterior, elbo_loss, kl_divergence,
                    posterior_predictive, sample_times)
from .data import (OperatorDataset, OperatorTask, RandomFieldSpec,
                   StandardScaler, generate, load_dataset, sample_random_field,
                   save_dataset)
from .metrics import (MetricReport, PredictionSet, evaluate_predictions,
                      interval_score, inverse_normal_cdf, miscalibration_area,
                      nll, rl2)
from .nn import (AffineLayer, OptimizerState, ParamStore, adamw_step, gelu,
                 gradcheck, one_cycle_lr, stream_rng)
from .operator import (DiffusionTimes, DinozaurBlock, FnoBlock, Network,
                       NetworkSpec, count_params, dinozaur_block_forward,
                       fno_block_forward, gradient_features, network_forward,
                       pad_and_crop)
from .spectral import (ConfigError, Field, FrequencyLattice, Grid, ModeSet,
                       SpectralField, diffuse, forward_fft, inverse_fft,
                       spectral_gradient)

__version__ = "0.1.0"

__all__ = [
    "AffineLayer", "ConfigError", "DiffusionTimes", "DinozaurBlock", "Field",
    "FnoBlock", "FrequencyLattice", "Grid", "MetricReport", "ModeSet",
    "Network", "NetworkSpec", "NoiseModel", "OperatorDataset", "OperatorTask",
    "OptimizerState", "ParamStore", "PredictionSet", "PredictiveSamples",
    "RandomFieldSpec", "SpectralField", "StandardScaler", "TimePrior",
    "VariationalPosterior", "adamw_step", "count_params", "diffuse",
    "dinozaur_block_forward", "elbo_loss", "evaluate_predictions",
    "fno_block_forward", "forward_fft", "gelu", "generate", "gradcheck",
    "gradient_features", "interval_score", "inverse_fft", "inverse_normal_cdf",
    "kl_divergence", "load_dataset", "miscalibration_area", "network_forward",
    "nll", "one_cycle_lr", "pad_and_crop", "posterior_predictive", "rl2",
    "sample_random_field", "sample_times", "save_dataset", "spectral_gradient",
    "stream_rng",
]
