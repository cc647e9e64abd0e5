"""Desk-scale uncertainty-guided single-step diffusion SR: teacher, pruning and distillation."""
from .distill import KernelConfig, dis_loss, mmd2, mse_dis
from .lightops import DSCLayer, FSCLayer, QGAMLayer, SelfAttention, dsc_forward, fsc_forward, qgam_forward
from .prune import ToyUNetSpec, VAESpec, complexity_report, fuse_convs, semantic_prune
from .schedule import build_schedule, invert_alpha
from .tensorcore import load_tensor, make_rng, save_tensor
from .uncertainty import UncertaintyOutput, analytic_alpha_target, tv_loss, uncertainty_loss

__version__ = "0.1.0"
