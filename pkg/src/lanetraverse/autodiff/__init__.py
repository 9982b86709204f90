from .nn import GRU, MLP, Linear, ParamStore
from .optim import Adam, adam_step
from .tensor import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    no_record,
    recording,
)

__all__ = [
    "Adam",
    "ContractError",
    "GRU",
    "Linear",
    "MLP",
    "ParamStore",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "no_record",
    "recording",
]
