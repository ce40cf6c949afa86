"""Small convolutional network engine: conv layers, a residual UNet and Adam."""
from .adam import AdamState, adam_step
from .layers import ConvLayer, conv_backward, conv_forward
from .unet import (Cache, NetworkParams, UNetSpec, featuremap_bytes, init_params, l2_loss,
                   load_params, make_identity_params, receptive_field, save_params,
                   unet_backward, unet_forward)

__all__ = [
    "AdamState", "adam_step", "ConvLayer", "conv_backward", "conv_forward", "Cache",
    "NetworkParams", "UNetSpec", "featuremap_bytes", "init_params", "l2_loss", "load_params",
    "make_identity_params", "receptive_field", "save_params", "unet_backward", "unet_forward",
]
