"""Reservoir-computer attractor reconstruction and Lyapunov diagnostics."""

from .harness import (ExperimentRecord, SweepConfig, generate_training_data,
                      lorenz_desk_config, power_spectrum, psd_mse,
                      qi_desk_config, report, run_single, run_sweep,
                      trusted_exponent_mask)
from .lyapunov import (AuxiliaryResult, KYResult, LyapunovSpectrum,
                       auxiliary_convergence, benettin, cle_spectrum,
                       cle_spectrum_selfdriven, kaplan_yorke, rc_spectrum)
from .model_io import load_model, save_model
from .reservoir import (FeatureMap, Reservoir, ReservoirParams,
                        RolloutDivergenceError, apply_feature_map,
                        autonomous_step, build_reservoir, drive, driven_step,
                        feature_map_jacobian, rollout, spectral_radius)
from .systems import (DivergenceError, SystemSpec, Trajectory, downsample,
                      drift, integrate, jacobian, read_trajectory_csv,
                      stochastic_rk2, true_lyapunov_spectrum,
                      write_trajectory_csv)
from .training import Readout, fit_readout, one_step_mse, predict

__version__ = "0.1.0"
