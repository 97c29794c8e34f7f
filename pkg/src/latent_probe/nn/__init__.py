from .initializers import SCHEMES, InitScheme, init_weights, initialize
from .layers import (
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    NonFiniteError,
    ReLU,
    Reshape,
    Sequential,
    ShapeError,
    Sigmoid,
    conv2d_forward,
    conv_output_size,
    dense_forward,
    log_softmax,
    relu,
    softmax_logprob,
)
from .optim import OptimizerState, optimizer_step
from .serialization import CheckpointError, load_tensors, save_tensors
