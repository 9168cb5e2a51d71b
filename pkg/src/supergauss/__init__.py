"""Supergaussian grouping, attention priors and differentiable splatting on CPU."""
from .autograd import ParamStore, Tensor, backward, grad_check
from .config import RunConfig, TrainConfig
from .data import Dataset, View, generate_synthetic, load_dataset, save_dataset
from .neighborhood import NeighborGraph, build_knn, descriptors, grouping_features
from .objective import LossWeights, d_avg, d_ctr, depth_mae, psnr, srocc, ssim
from .partition import SupergaussianPartition, cut_pursuit, group_stats, tune_mu
from .priornet import NetConfig, PriorNet, predict_attributes
from .rasterizer import RenderOutput, RenderSettings, render, render_backward, render_scene
from .scene import Camera, GaussianSet, covariance, project_gaussian, quaternion_to_rotation
from .trainer import TrainState, densify, evaluate, run_grouping, train, train_step

__version__ = "0.1.0"
