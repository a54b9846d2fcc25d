"""Part-aware re-identification: two-branch part pooling, a momentum memory
bank of part features, triplet-center and memory-softmax losses, and
retrieval evaluation, on a small numpy autodiff engine."""

from .autodiff import NonFiniteError, ShapeError, Tape, Tensor, finite_diff_check
from .config import ConfigError, RunConfig, load_run_config
from .dataio import DataError, SampleRecord, load_manifest, read_feature_file, write_feature_file
from .estimator import PartAwareReID
from .evaluation import DescriptorSet, average_precision, cmc, evaluate, mean_ap, rank, summarize
from .losses import LossConfig, memory_softmax_loss, triplet_center_loss
from .memory import ClassCenters, MemoryBank
from .model import ModelConfig, PartAwareModel
from .parts import PartFeatureSet, part_features, partition, stripe_bounds
from .synth import SyntheticSpec, generate, synth_generate
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ClassCenters", "ConfigError", "DataError", "DescriptorSet", "LossConfig", "MemoryBank",
    "ModelConfig", "NonFiniteError", "PartAwareModel", "PartAwareReID", "PartFeatureSet", "RunConfig",
    "SampleRecord", "ShapeError", "SyntheticSpec", "Tape", "Tensor", "TrainConfig", "average_precision",
    "cmc", "evaluate", "finite_diff_check", "generate", "load_checkpoint", "load_manifest",
    "load_run_config", "mean_ap", "memory_softmax_loss", "part_features", "partition", "rank",
    "read_feature_file", "save_checkpoint", "stripe_bounds", "summarize", "synth_generate", "train",
    "triplet_center_loss", "write_feature_file",
]
