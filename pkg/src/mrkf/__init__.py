"""Multirate extended Kalman filtering for anaerobic digestion monitoring."""

__version__ = "0.1.0"

from .adm1r3 import (Adm1r3Model, ThetaParams, aggregate_constants,
                     influent_library, mix_influent)
from .ekf import (GaussianBelief, ModelHooks, NoiseConfig, NormalizationMaps,
                  clip_prior, joseph_update, measurement_update,
                  normalized_hooks, reduce_outputs, time_update)
from .events import (OfflineReturn, OnlineMeasurement, SampleDrawn,
                     read_events_csv, write_events_csv)
from .multirate import (AugmentedBelief, MultirateOptions, PendingSample,
                        augment, build_indicator, propagate_augmented,
                        run_multirate, update_major, update_minor,
                        FUSION_EXACT, FUSION_FROZEN)
from .odeengine import (DivergenceError, InputSchedule, IvpProblem,
                        integrate_piecewise, propagate_joint,
                        solve_ivp_problem)
from .scenario import (ScenarioBundle, ScenarioConfig, build_scenario,
                       generate_feeding, perturb_initial, perturb_params,
                       simulate_truth, synthesize_measurements, zoh_forecast)
from .tuning import (RunMetrics, boulkroune_cost, evaluate_run, grid_search,
                     lhs_sample, nis, nrmse)
