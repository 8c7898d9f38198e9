"""Neural substrate: tokenizer, transformer models, training loop, checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, load_into, read_header, save_checkpoint, state_hash
from .models import (
    EncoderConfig,
    Seq2SeqConfig,
    TransformerEncoder,
    TransformerSeq2Seq,
    embedding_gradient,
)
from .tokenizer import (
    PAD_TOKEN,
    SEP_TOKEN,
    SPECIAL_TOKENS,
    TURN_SEP,
    Tokenizer,
    split_tokens,
)
from .training import StepReport, Trainer, TrainStep, set_train_mode

__all__ = [
    "CheckpointError",
    "EncoderConfig",
    "PAD_TOKEN",
    "SEP_TOKEN",
    "SPECIAL_TOKENS",
    "Seq2SeqConfig",
    "StepReport",
    "Tokenizer",
    "TrainStep",
    "Trainer",
    "TransformerEncoder",
    "TransformerSeq2Seq",
    "TURN_SEP",
    "embedding_gradient",
    "load_checkpoint",
    "load_into",
    "read_header",
    "save_checkpoint",
    "set_train_mode",
    "split_tokens",
]
