"""cotvote: self-consistency training for two-stage multimodal reasoners.

During training, each example is forwarded N times under independent
dropout masks; the resulting logit sets are aggregated with a mean +
variance-weighted voting kernel and the loss is taken against the voted
logits. Inference is a single deterministic pass and is unaffected by
the vote. Ships with a minimal f64 autodiff engine, a toy multimodal
encoder-decoder, a synthetic grid-world QA generator, evaluation
metrics, and a CLI.
"""

from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import ModelConfig, MultimodalExample
from .pipeline import AblationMode, SelfConsistencyReasoner, TrainConfig
from .rng import RngStream, substream_id
from .synthdata import DatasetSpec, generate_dataset
from .tensor import Tensor, finite_difference_check, no_grad
from .voting import LogitStack, VoteConfig, VotedLogits, vote_logits, voted_loss

__all__ = [
    "AblationMode",
    "ConfigError",
    "DataError",
    "DatasetSpec",
    "LogitStack",
    "ModelConfig",
    "MultimodalExample",
    "NumericError",
    "RngStream",
    "SelfConsistencyReasoner",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "VoteConfig",
    "VotedLogits",
    "finite_difference_check",
    "generate_dataset",
    "no_grad",
    "substream_id",
    "vote_logits",
    "voted_loss",
]

__version__ = "0.1.0"
