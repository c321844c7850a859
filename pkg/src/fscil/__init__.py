"""Few-shot class-incremental learning on a miniature prompted ViT.

The package is self-contained: a small float64 autodiff engine, a
vision transformer with attention-prefix and token prompts plus
input-conditioned prompt modulation, prototype classification, the
divergence and semantic-distillation objectives, a deterministic
synthetic data protocol, and an experiment harness with an ablation
grid and gradient verification.
"""

from .backbone import Backbone, ForwardPolicy, ForwardResult, ViTConfig
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericError,
    ParseError,
    StreamValidationError,
)
from .harness import (
    ABLATION_CELLS,
    ExperimentConfig,
    prepare_assets,
    run_ablation_suite,
    run_experiment,
)
from .objectives import (
    ClassEmbeddingTable,
    PrototypeClassifier,
    base_session_loss,
    incremental_session_loss,
)
from .optim import AdamState, ParamStore, Parameter, adam_step, cosine_lr
from .prompts import PromptState
from .protocol import PRESETS, generate_synthetic, load_dataset, make_stream, save_dataset
from .report import RunReport, read_run_report, write_run_report
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ABLATION_CELLS",
    "AdamState",
    "Backbone",
    "ClassEmbeddingTable",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "ExperimentConfig",
    "ForwardPolicy",
    "ForwardResult",
    "NumericError",
    "ParamStore",
    "Parameter",
    "ParseError",
    "PRESETS",
    "PromptState",
    "PrototypeClassifier",
    "RunReport",
    "StreamValidationError",
    "Tensor",
    "ViTConfig",
    "adam_step",
    "base_session_loss",
    "cosine_lr",
    "generate_synthetic",
    "incremental_session_loss",
    "load_dataset",
    "make_stream",
    "no_grad",
    "prepare_assets",
    "read_run_report",
    "run_ablation_suite",
    "run_experiment",
    "save_dataset",
    "write_run_report",
    "__version__",
]
