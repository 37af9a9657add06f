"""Double similarity distillation for semantic segmentation, CPU-scale.

Transfers two kinds of structure from a frozen teacher network to a
compact student: pixel-wise similarity carried by residual attention maps
taken across network depths, and category-wise similarity carried by the
correlation matrix of temperature-softened class responses. Ships with
the comparison baselines (soft targets, attention transfer, feature
mimicking, pairwise affinity), an exact FLOPs cost model for each
knowledge-extraction stage, segmentation metrics, a seeded synthetic
dataset, and a deterministic teacher/student training pipeline.
"""

from .attention import TapSet, attention_map, build_taps, residual_attention
from .cost_model import (FlopsReport, LayerGeometry, count_ops,
                         flops_affinity, flops_csd, flops_psd, flops_ratio,
                         flops_report)
from .data import SynthSample, generate, load_dataset, save_dataset
from .losses import (LossWeights, affinity_loss, affinity_matrix, at_loss,
                     correlation_matrix, csd_loss, fitnet_loss, kd_loss,
                     psd_loss, softmax_cross_entropy, total_loss)
from .metrics import (IGNORE_LABEL, UndefinedMetricError, confusion, miou,
                      per_class_iou, pixel_acc)
from .nets import LayerSpec, SegNet, SegNetSpec, student_spec, teacher_spec
from .tensor_ops import (EPS, GradPair, finite_diff_check, l2_normalize,
                         resize_bilinear, softmax_over_channels)
from .train import (Checkpoint, DistillReport, TrainConfig,
                    TrainingDivergence, distill_student, evaluate_net,
                    poly_lr, sgd_step, train_teacher)

__version__ = "0.1.0"

__all__ = [
    "TapSet", "attention_map", "build_taps", "residual_attention",
    "FlopsReport", "LayerGeometry", "count_ops", "flops_affinity",
    "flops_csd", "flops_psd", "flops_ratio", "flops_report",
    "SynthSample", "generate", "load_dataset", "save_dataset",
    "LossWeights", "affinity_loss", "affinity_matrix", "at_loss",
    "correlation_matrix", "csd_loss", "fitnet_loss", "kd_loss", "psd_loss",
    "softmax_cross_entropy", "total_loss",
    "IGNORE_LABEL", "UndefinedMetricError", "confusion", "miou",
    "per_class_iou", "pixel_acc",
    "LayerSpec", "SegNet", "SegNetSpec", "student_spec", "teacher_spec",
    "EPS", "GradPair", "finite_diff_check", "l2_normalize",
    "resize_bilinear", "softmax_over_channels",
    "Checkpoint", "DistillReport", "TrainConfig", "TrainingDivergence",
    "distill_student", "evaluate_net", "poly_lr", "sgd_step",
    "train_teacher",
]
