"""Radiance fields bound to a thin shell around a parametric head mesh."""

from .field import EncodingConfig, Phase, RadianceField, load_checkpoint, save_checkpoint
from .geometry import Bvh, TriangleMesh, build_bvh, closest_points, first_hits
from .head import FaceParams, HeadModelAssets, deform, deform_jacobian, load_assets, make_toy_head, save_assets
from .metrics import psnr, ssim
from .render import Camera, Ray, RenderSettings, render_image, render_rays
from .retarget import build_affine_field, filter_open_mouth_rays, render_retargeted
from .training import Dataset, TrainConfig, init_state, train, train_step

__version__ = "0.1.0"
