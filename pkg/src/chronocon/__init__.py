"""Chronological contrastive pretraining for longitudinal severity scoring."""
from .data import Cohort, Sample, load_cohort, save_cohort
from .synthetic import CohortConfig, generate
from .pairing import Direction, PairingPlan, chrono_pairs
from .losses import chronocon_loss, contrastive_loss
from .training import Model, TrainConfig, finetune, pretrain, scratch

__version__ = "0.1.0"
