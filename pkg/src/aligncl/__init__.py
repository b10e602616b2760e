"""Aligned contrastive training for multi-exit transformer encoders."""

from .checkpoint import load, save
from .data import EncodedData, LabeledText, SynthSpec, Vocab, generate_synthetic, load_tsv, make_batches
from .estimator import MultiExitClassifier
from .grad_align import acl_grad_gate, angle_histogram, flatten_grads, grad_angle, gated_step_grads
from .inference import ExitPolicy, ExitTrace, layer_score_curve, predict_entropy, predict_fixed, predict_patience
from .losses import (acl_cl_loss, acl_embed_loss, ce_loss, combine, info_nce_loss, kd_loss,
                     scl_loss, ContrastiveBatch)
from .model import ModelConfig, MultiExitModel, count_flops
from .optim import AdamW, LinearSchedule
from .tensor import Tape, Tensor
from .training import (RegimeConfig, RunLog, TrainingDiverged, run_experiment, train_alt, train_jt,
                       train_model, train_stage1, train_stage2)

__version__ = "0.1.0"
