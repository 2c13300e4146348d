"""Small float64 autodiff engine plus the sequence encoders built on it."""

from .nn import (
    EncoderParams,
    RegressorParams,
    attention_block,
    causal_mask,
    dropout,
    encode_history,
    gru_cell,
    init_encoder,
    init_regressor,
    predict_outcome,
)
from .optim import OptimizerState, adam_state, adam_step
from .tensor import ContractError, ShapeError, Tape, Tensor, backward, grad

__all__ = [
    "ContractError",
    "EncoderParams",
    "OptimizerState",
    "RegressorParams",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_state",
    "adam_step",
    "attention_block",
    "backward",
    "causal_mask",
    "dropout",
    "encode_history",
    "grad",
    "gru_cell",
    "init_encoder",
    "init_regressor",
    "predict_outcome",
]
