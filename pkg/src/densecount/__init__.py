"""densecount: density-map object counting for overhead imagery.

A self-contained float64 stack: tape-based autograd, the layer operators of
an attention + scale-pyramid + deformable-convolution counting network,
Gaussian density ground truth, augmentation, SGD training and MAE/RMSE
evaluation, all verifiable at desk scale on synthetic scenes.
"""

__version__ = "0.1.0"

from .tensor import (Graph, Tensor, backward, constant, finite_diff_grad, gaussian,
                     sum_all, tensor_create, zeros)
from .layers import (AttentionSpec, ConvSpec, bilinear_sample, channel_attention,
                     concat_channels, conv2d, deformable_conv2d, max_pool2x2,
                     spatial_attention)
from .network import (Model, ModelConfig, build_aspdnet, forward, load_model,
                      predict_count, save_model)
from .density import (DensityMap, GaussianSpec, annotations_to_points,
                      downsample_density, generate_density)
from .data import (AnnotatedImage, AnnotationSet, augment, load_annotations,
                   load_manifest, resize_with_annotations, synth_scene)
from .training import TrainConfig, TrainLog, desk_scale, euclidean_loss, full_scale, sgd_step, train
from .evaluation import Metrics, ablation_run, evaluate, mae, rmse

__all__ = [
    "Graph", "Tensor", "backward", "constant", "finite_diff_grad", "gaussian",
    "sum_all", "tensor_create", "zeros",
    "AttentionSpec", "ConvSpec", "bilinear_sample", "channel_attention",
    "concat_channels", "conv2d", "deformable_conv2d", "max_pool2x2", "spatial_attention",
    "Model", "ModelConfig", "build_aspdnet", "forward", "load_model", "predict_count",
    "save_model",
    "DensityMap", "GaussianSpec", "annotations_to_points", "downsample_density",
    "generate_density",
    "AnnotatedImage", "AnnotationSet", "augment", "load_annotations", "load_manifest",
    "resize_with_annotations", "synth_scene",
    "TrainConfig", "TrainLog", "desk_scale", "euclidean_loss", "full_scale", "sgd_step", "train",
    "Metrics", "ablation_run", "evaluate", "mae", "rmse",
]
