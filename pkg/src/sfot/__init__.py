"""Optimal-transport sequence matching for training autoregressive models."""

from .costs import CostKind, CostMode, FeatureSequence, LayerTag, build_cost, cosine_cost, order_penalty_matrix
from .estimator import OTSequenceModel
from .model import ModelConfig, SamplingPolicy, SeqModel, load_checkpoint, save_checkpoint
from .ot import IpotConfig, TransportPlan, exact_ot_oracle, ipot_solve, ot_objective, sinkhorn_solve
from .training import LossBreakdown, TrainConfig, train

__version__ = "0.1.0"
