"""Early anomaly detection and stop decisions for trajectory-executing policies."""

from .baselines import (VaeConfig, VaeModel, WindowedConfig, WindowedModel,
                        train_vae, train_windowed, vae_score, windowed_score)
from .checkpoint import load_detector, save_detector
from .detectors import DETECTOR_KINDS, default_config, train_detector
from .episodes import (Dataset, DatasetFormatError, Episode, NormStats,
                       SubEpisode, compute_norm_stats, dataset_fingerprint,
                       denormalize, load_dataset, normalize, prefix,
                       sample_training_window, save_dataset, subepisode_of)
from .esp import EnsembleModel, EspConfig, ensemble_spread, train_ensemble
from .flow import (FlowModel, FlowTrainConfig, flow_forward, flow_inverse,
                   flow_score, mask_subepisode, nll, sample_weight,
                   train_wm_flow)
from .metrics import (DEFAULT_FRACTIONS, EvalReport, ScoredSet, auroc,
                      fpr_at_tpr, parse_report_csv, partial_length_eval,
                      render_report)
from .monitor import (Decision, MonitorState, ThresholdSchedule,
                      calibrate_thresholds, default_periods, emit_trace,
                      monitor_step, run_monitor, stop_step)
from .net import TrainingDiverged
from .synth import (ANOMALY_KINDS, AnomalySpec, SynthConfig, generate_dataset,
                    inject_anomaly)

__version__ = "0.1.0"
