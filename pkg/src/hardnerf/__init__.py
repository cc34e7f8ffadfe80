"""Desk-scale neural radiance field trainer with online hard sample mining.

Modules: ``scene`` (analytic scenes, datasets), ``encoding`` (hash grid),
``field`` (MLPs with inference/training forwards and a manual backward),
``sampler`` (pixels, rays, occupancy), ``renderer`` (compositing and its
backward), ``hardmine`` (importance, batch sizing, draws), ``trainer``,
``evalbench`` and ``cli``.
"""

from .encoding import HashGrid, HashGridConfig, encode, encode_backward, hash_index
from .evalbench import (
    Histogram,
    measured_network_fraction,
    pdf_histogram,
    psnr,
    skewness,
    theoretical_runtime_fraction,
)
from .field import FieldConfig, FieldOutput, FieldParams, Tape, activate, backward, forward_inference, forward_training
from .hardmine import (
    ImportanceState,
    batch_ratio,
    draw_hard_indices,
    hard_batch_size,
    importance,
    update_tau_ema,
    variance_reduction,
)
from .ledger import CostLedger
from .renderer import GradCache, RenderResult, backward_to_preactivations, composite, pixel_loss
from .sampler import OccupancyGrid, Rays, SampleBatch, sample_pixels, sample_points, update_occupancy
from .scene import Camera, Dataset, Scene, eval_scene, generate_scene, make_dataset, render_ground_truth
from .trainer import Trainer, TrainerConfig, train

__version__ = "0.1.0"
