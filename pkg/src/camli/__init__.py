"""Desk-scale bidirectional camera-LiDAR fusion for joint optical-flow and
scene-flow estimation: a minimal tape-based differentiation engine, point
cloud kernels, correlation pyramids, the bidirectional fusion operator, and
a toy recurrent two-branch network with synthetic-scene training."""

from .geometry import (CameraIntrinsics, PointCloud, bilinear_sample,
                       furthest_point_sampling, inverse_depth_scaling,
                       inverse_depth_scaling_inv, knn_search, project_points,
                       unproject_points)
from .gradcheck import grad_check
from .metrics import MetricReport, compute_metrics
from .network import CamLiRAFT, FlowEstimate, ModelConfig, convex_upsample, sequence_loss
from .serialization import load_tensor, save_tensor
from .synthdata import FramePair, SceneSpec, generate_scene, read_dataset, render_frame, write_dataset
from .tensor import Parameter, Tape, Tensor, backward, stop_gradient
from .training import AdamW, TrainConfig, evaluate, train_loop, zero_flow_baseline

__version__ = "0.1.0"
