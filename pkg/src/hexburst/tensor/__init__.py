from .core import Tensor, as_tensor, backward, build_tape
from .ops import (
    abs_, add, bilinear_warp, channels, charbonnier, clamp, concat, conv2d, interp_matrix,
    mean, mul, pixel_shuffle, relu, reshape, residual_block, resize_bilinear,
    space_to_depth, split_batch, sub, sum_, unary,
)
from .optim import AdamW, OptimState, adamw_step
