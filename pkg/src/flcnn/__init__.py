"""Grayscale image denoising with warmup/boost residual inception networks.

The package is a self-contained numpy implementation: dense NCHW tensor
primitives with exact backward passes, declarative network graphs,
orthogonal initialization, Adam training on AWGN-corrupted patches, and
PSNR/SSIM evaluation with CSV reports.
"""

from .imageio import GrayImage, PgmFormatError, from_unit, read_pgm, rgb_to_luma, to_unit, write_pgm
from .model import (ArchConfig, BadMagicError, CheckpointError, ManifestMismatchError,
                    ModelGraph, Node, ParamStore, TruncatedPayloadError,
                    VersionMismatchError, backward, build_dncnn_like,
                    build_flashlight, build_inception_layer, count_params,
                    enumerate_architectures, forward, load_checkpoint, new_graph,
                    orthogonal_init, receptive_field, save_checkpoint)
from .tensor import (BnParams, ConvParams, batchnorm_backward, batchnorm_forward,
                     concat_backward, concat_channels, conv2d_backward,
                     conv2d_forward, elementwise_add, relu_backward, relu_forward,
                     set_debug_validation)
from .train import (AdamState, TrainConfig, TrainLog, adam_step, add_awgn,
                    gradient_check, init_adam, lr_for_epoch, mse_loss,
                    sample_patches, train, write_train_log_csv)
from .evaluate import (EvalReport, EvalRow, evaluate_dataset, psnr, ssim,
                       write_report_csv)

__version__ = "0.1.0"
