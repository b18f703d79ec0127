from .gradcheck import batched_finite_diff_grad, check_gradient, finite_diff_grad, max_relative_error
from .io import read_image, read_maskset, write_image, write_maskset
from .masks import resize_mask
from .metrics import psnr, ssim
from .types import GradCheckReport, MaskSet, ShapeError, check_image, check_same_shape

__all__ = [
    "GradCheckReport",
    "MaskSet",
    "ShapeError",
    "batched_finite_diff_grad",
    "check_gradient",
    "check_image",
    "check_same_shape",
    "finite_diff_grad",
    "max_relative_error",
    "psnr",
    "read_image",
    "read_maskset",
    "resize_mask",
    "ssim",
    "write_image",
    "write_maskset",
]
