"""Degradation-subspace multi-task SR training with PSNR-distance rebalancing."""

from .img import ImagePlane, MetricReport, PSNR_CAP, metric_report, psnr, ssim, to_luma
from .degrade import DegradationConfig, add_gaussian_noise, apply_chain, gaussian_blur, \
    jpeg_compress, resize
from .taskspace import SubspaceSpec, Task, TaskSet, build_taskset, build_validation, \
    make_training_batch, partition_default, sample_config
from .rebalance import IntervalPlan, TaskSnapshot, compute_weights, equivalence_oracle, \
    plan_interval, psnr_distance, weights_to_quotas

__version__ = "0.1.0"

__all__ = [
    "ImagePlane", "MetricReport", "PSNR_CAP", "metric_report", "psnr", "ssim", "to_luma",
    "DegradationConfig", "add_gaussian_noise", "apply_chain", "gaussian_blur",
    "jpeg_compress", "resize",
    "SubspaceSpec", "Task", "TaskSet", "build_taskset", "build_validation",
    "make_training_batch", "partition_default", "sample_config",
    "IntervalPlan", "TaskSnapshot", "compute_weights", "equivalence_oracle",
    "plan_interval", "psnr_distance", "weights_to_quotas",
    "__version__",
]
