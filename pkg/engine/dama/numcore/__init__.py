# Numerical core: dense matrices, SVD, seeded randomness, reverse-mode gradients
from dama.numcore.matrix import Matrix, as_matrix, matmul, transpose, add, scale, frobenius_norm
from dama.numcore.svd import SvdResult, svd
from dama.numcore.rng import Rng
from dama.numcore.autograd import (
    Parameter,
    ParameterStore,
    Node,
    GradientContext,
    clip_grad_norm,
    global_norm,
)

__all__ = [
    "Matrix",
    "as_matrix",
    "matmul",
    "transpose",
    "add",
    "scale",
    "frobenius_norm",
    "SvdResult",
    "svd",
    "Rng",
    "Parameter",
    "ParameterStore",
    "Node",
    "GradientContext",
    "clip_grad_norm",
    "global_norm",
]
