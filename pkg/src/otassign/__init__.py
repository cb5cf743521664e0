"""Generative training with the assignment method under arbitrary transport costs."""
from .assignment import (AssignmentBatch, DualEstimate, RealSet, assigner_gradient, assigner_loss,
                         batch_assign, c_transform_assign, dual_estimate, optimality_check,
                         refresh_psi_cache, stability_check)
from .costs import CostSpec, cost, cost_grad_x, cost_matrix, psnr_cost, ssim, unit_diameter_scale
from .data import Dataset, load_idx, preprocess, ring_of_gaussians, write_idx
from .evaluation import DiscreteMeasure, TransportPlan, assignment_variance, emd, w1_eval
from .net import DenseNet, Layer, RMSProp, load_checkpoint, save_checkpoint
from .trainer import LatentSampler, TrainConfig, sample_latent, train

__version__ = "0.1.0"
