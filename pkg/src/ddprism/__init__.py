"""Multi-view source separation with per-source diffusion priors learned by EM."""

from .data import Dataset, ManifoldSpec, MixingSpec, View, generate_dataset, load_dataset, save_dataset
from .denoiser import ContractError, GaussianDenoiser, MLPDenoiser, fit_gaussian
from .em import EMConfig, RunRecorder, gaussian_init, run_em_contrastive, run_em_joint
from .gibbs import GibbsConfig, gibbs_sample, residual
from .metrics import SinkhornConfig, psnr, sinkhorn_divergence
from .posterior import Observation, SamplerConfig, pc_sample_posterior, pc_sample_prior
from .sde import NoiseSchedule
from .training import TrainConfig

__version__ = "0.1.0"
