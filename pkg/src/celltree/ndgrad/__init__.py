from .nn import BatchNorm1d, DegenerateBatchError, Linear, Module, kaiming_uniform
from .optim import Adam, AdamState, MissingGradientError
from .special import DomainError, digamma, lgamma  # numpy-level kernels
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    clip,
    div,
    exp,
    gaussian_reparam_sample,
    leaky_relu,
    log,
    matmul,
    mul,
    neg,
    recording,
    sigmoid,
    softplus,
    sqrt,
    sub,
    tanh,
    tmean,
    tsum,
)
from .tensor import lgamma as tlgamma  # tensor op, distinct from the numpy kernel
