"""Classification with Gaussian logits regularized toward class prototypes."""

from .backbone import BackboneConfig, Model, forward, infer, init, resnet_mini, vgg_mini
from .data import Dataset, NormStats, gen_blobs, gen_gaussian_noise, gen_shifted_blobs, gen_uniform_noise
from .gaussian_head import GaussianLogits, HeadKind, kl_to_prototype, loss, predict
from .ood import auroc, aupr, detection_metrics, fpr_at_tpr, ood_scores
from .trainer import OptimizerConfig, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "Dataset", "GaussianLogits", "HeadKind", "Model", "NormStats",
    "OptimizerConfig", "TrainConfig", "auroc", "aupr", "detection_metrics", "forward",
    "fpr_at_tpr", "gen_blobs", "gen_gaussian_noise", "gen_shifted_blobs", "gen_uniform_noise",
    "infer", "init", "kl_to_prototype", "load_checkpoint", "loss", "ood_scores", "predict",
    "resnet_mini", "save_checkpoint", "train", "vgg_mini",
]
