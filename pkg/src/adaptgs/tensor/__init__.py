from .core import (Tensor, add, as_tensor, clip, concat, custom, div, elementwise, exp, gelu,
                   getitem, grad_enabled, track_allocations, log, matmul, minimum, mul, no_grad, power, relu, reshape,
                   scale, set_strict, sigmoid, softplus, sqrt, stack, sub, tabs, take_rows, tanh,
                   transpose, tsum, tmean, where)
from .functional import bilinear_sample, conv2d, layernorm, mse, softmax
from .optim import OptimizerState, adam_init, adam_step, cosine_lr
from .checkpoint import load_arrays, save_arrays
from .gradcheck import gradcheck, numerical_grad, rel_error
