"""Feature-based anomaly detection from per-filter CNN activation statistics."""
from .core import (
    EnsembleMember, EnsembleModel, FadsModel, aggregate, embed, ensemble_fit, ensemble_score, fit,
    r_vector, score,
)
from .engine import ActivationRecord, backward, forward
from .estimator import FADSDetector, FADSEnsemble
from .evaluation import per_part_score, pixel_roc_auc, roc_auc, stratified_kfold
from .localization import RegionMask, SaliencyMap, anomaly_loss, region_label, saliency
from .netio import NetworkGraph, load_graph, load_weights, make_reference_net, save_graph, save_weights

__version__ = "0.1.0"

__all__ = [
    "ActivationRecord", "EnsembleMember", "EnsembleModel", "FADSDetector", "FADSEnsemble", "FadsModel",
    "NetworkGraph", "RegionMask", "SaliencyMap", "aggregate", "anomaly_loss", "backward", "embed",
    "ensemble_fit", "ensemble_score", "fit", "forward", "load_graph", "load_weights", "make_reference_net",
    "per_part_score", "pixel_roc_auc", "r_vector", "region_label", "roc_auc", "saliency", "save_graph",
    "save_weights", "score", "stratified_kfold",
]
