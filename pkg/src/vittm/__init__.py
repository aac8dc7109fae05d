"""Two-stream vision transformer with read/write memory heads, built on numpy."""

from .analysis import CountMode, CostReport, bench_latency, count_flops, count_params, enumerate_params
from .config import (ABLATION_GRID, FusionKind, HeadKind, InitMode, ModelKind, ViTTMConfig, build_preset,
                     preset_names)
from .data import (SyntheticDataset, SyntheticTaskSpec, TaskMode, gen_synthetic, load_cifar10,
                   write_cifar10)
from .errors import (CompatibilityError, ConfigurationError, ContractError, DimensionError, FormatError,
                     VittmError)
from .model import ViTBaseline, ViTTM, build_model, load_checkpoint, load_model, save_checkpoint
from .tensor import Parameter, Tensor, backward, grad_check, no_grad
from .trainer import AdamW, TrainConfig, TrainingDiverged, evaluate, train

__version__ = "0.1.0"
