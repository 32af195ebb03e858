from .functional import (
    LstmParams,
    NonFiniteError,
    ShapeError,
    StaleCacheError,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    embedding_backward,
    embedding_lookup,
    lstm_cell,
    lstm_cell_backward,
    lstm_readout,
    lstm_readout_backward,
    maxpool_backward,
    maxpool_forward,
    softmax,
    weighted_xent,
)
from .optim import Adam, AdamState, adam_step
from .serialize import load_weights, save_weights

__all__ = [
    "Adam", "AdamState", "LstmParams", "NonFiniteError", "ShapeError", "StaleCacheError",
    "adam_step", "batchnorm_backward", "batchnorm_forward", "conv2d_backward", "conv2d_forward",
    "dense_backward", "dense_forward", "dropout_backward", "dropout_forward", "embedding_backward",
    "embedding_lookup", "load_weights", "lstm_cell", "lstm_cell_backward", "lstm_readout",
    "lstm_readout_backward", "maxpool_backward", "maxpool_forward", "save_weights", "softmax",
    "weighted_xent",
]
