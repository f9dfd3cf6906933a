"""Minimal reverse-mode autodiff over numpy arrays."""
from .nn import (GELU, DEFAULT_DTYPE, Dropout, LayerNorm, Linear, Module, Parameter, ReLU,
                 Sequential)
from .optim import Adam, GradientBlowUp, OptimizerState, adam_step, cosine_lr
from .tensor import (FlopCounter, ShapeError, Tensor, add, as_tensor, broadcast_to, chamfer,
                     concat, count_flops, cross_entropy, div, dropout, exp, gather, gelu, getitem,
                     grad_enabled, layer_norm, linear, log, log_softmax, matmul, mean, mul,
                     no_grad, power, relu, reshape, softmax, sub, swapaxes, tmax, transpose, tsum)
