"""Unsupervised deblurring with disentangled content and blur representations."""

from .blur import TrajectoryParams, apply_blur, build_blurred_set, generate_trajectory, rasterize_kernel
from .config import TrainConfig, lr_at
from .losses import LossWeights, adversarial_losses, cycle_loss, kl_loss, perceptual_loss, total_loss
from .networks import NetworkConfig, init_model
from .training import deblur, deblur_image, forward_backward_translate, train, train_step

__version__ = "0.1.0"
