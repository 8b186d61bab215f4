"""Transformer beamformers for multi-user MISO downlinks.

Channel tokenization, BERT and UBERT encoders with power-feasible outputs,
classical solver oracles (WMMSE, Dinkelbach, max-min) and the training and
evaluation pipeline behind the ``tokbeam`` command.
"""
from .bert import BertBeamformer, BertConfig
from .channel import CsiSample, TaskSpec, Utility, generate_rayleigh
from .kernels import BACKEND as KERNEL_BACKEND
from .training import TrainConfig, evaluate, finetune, predict, pretrain
from .ubert import UbertBeamformer, UbertConfig

__version__ = "0.1.0"

__all__ = [
    "BertBeamformer", "BertConfig", "CsiSample", "KERNEL_BACKEND", "TaskSpec", "TrainConfig",
    "UbertBeamformer", "UbertConfig", "Utility", "evaluate", "finetune", "generate_rayleigh",
    "predict", "pretrain",
]
