from .forest import DecisionTree, RandomForest
from .harness import (
    FEATURE_MODES,
    KNOBS,
    AblationRow,
    ablation_csv,
    ablation_run,
    configs_for,
    denoising_score,
    evaluate_model,
    extract_features,
    few_shot_curve,
    reconstruct_all,
    spike_suite_score,
    stratified_subsample,
)
from .metrics import ConfusionMatrix, ReconMetrics, confusion_from_counts, confusion_metrics, recon_metrics
from .probes import ALGORITHMS, ProbeResult, fit_predict_probe, predict_probe
