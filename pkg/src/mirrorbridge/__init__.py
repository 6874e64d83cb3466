"""Gaussian-mixture Schrödinger bridges trained by online mirror descent."""
from .gmm import (ConditionalMixture, GmmPotential, condition, grad_hess_log_density,
                  load_checkpoint, log_density, potential_value, sample, save_checkpoint)
from .wfr import StepRejected, WfrTangent, apply_tangent, wfr_grad
from .vomd import MetricLog, OmdSchedule, TrainerConfig, blended_tangent, step_size, train
from .solvers import (DiscretePlan, FitConfig, discrete_sinkhorn, ema_update, fit_reverse_kl,
                      reverse_kl_loss)
from .dynamics import Trajectory, sample_bridge, sample_sde, sb_drift
from .metrics import (GaussianMoments, bw2_gaussian, bw_uvp, cbw_uvp, energy_distance,
                      gaussian_eot_plan, mc_kl)

__version__ = "0.1.0"
