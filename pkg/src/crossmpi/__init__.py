"""Reference-based super-resolution with plane-sweep multiplane images.

A low-resolution view is super-resolved by transferring detail from a
calibrated high-resolution reference: plane-aware attention over a plane
sweep volume estimates per-depth occupancy, guided upsampling refines it to
the target resolution, and a fusion network merges the transferred detail
with the upsampled input.  A depth map is produced as a byproduct.
"""

from .autodiff import Parameter, Tensor
from .data import (Checkpoint, SequenceRecord, TrainingTuple, assemble_tuple,
                   load_checkpoint, load_optical_zoom_pair, parse_sequence_file,
                   read_png, save_checkpoint, write_png)
from .errors import (CheckpointError, CrossMPIError, DataError, ParseError,
                     ScheduleError, TrainingDiverged)
from .geometry import (CameraCalibration, DepthPlaneSet, Homography,
                       PlaneSweepVolume, build_plane_sweep_volume,
                       plane_homography, sample_depth_planes, warp_image)
from .imaging import psnr, resample_bicubic, resize_nearest, ssim
from .losses import (LossWeights, PerceptualBackbone, internal_supervision_loss,
                     perceptual_loss, reconstruction_loss, total_loss)
from .model import (AlphaMaps, CrossMPI, ModelConfig, MultiplaneImage,
                    compose_sr_mpi, extract_depth, plane_aware_attention,
                    synthesize_transfer)
from .trainer import Adam, StageSettings, TrainSchedule, run_schedule, run_stage

__version__ = "0.1.0"

__all__ = [
    "Adam", "AlphaMaps", "CameraCalibration", "Checkpoint", "CheckpointError",
    "CrossMPI", "CrossMPIError", "DataError", "DepthPlaneSet", "Homography",
    "LossWeights", "ModelConfig", "MultiplaneImage", "Parameter", "ParseError",
    "PerceptualBackbone", "PlaneSweepVolume", "ScheduleError", "SequenceRecord",
    "StageSettings", "Tensor", "TrainSchedule", "TrainingDiverged",
    "TrainingTuple", "assemble_tuple", "build_plane_sweep_volume",
    "compose_sr_mpi", "extract_depth", "internal_supervision_loss",
    "load_checkpoint", "load_optical_zoom_pair", "parse_sequence_file",
    "perceptual_loss", "plane_aware_attention", "plane_homography", "psnr",
    "read_png", "reconstruction_loss", "resample_bicubic", "resize_nearest",
    "run_schedule", "run_stage", "sample_depth_planes", "save_checkpoint",
    "ssim", "synthesize_transfer", "total_loss", "warp_image", "write_png",
]
