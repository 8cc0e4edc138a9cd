"""Salient sparse federated learning, simulated at desk scale with numpy."""

from ssfl.nn import LayerLayout, mlp_layout, init_kaiming, forward, loss_ce, backward, sgd_step, lr_at_round
from ssfl.data import Dataset, ClientShard, PartitionSpec, make_synthetic
from ssfl.masks import local_saliency, aggregate_saliency, topk_mask, oracle_mask, mask_error
from ssfl.comm import CommLedger, payload_bytes, setup_costs
from ssfl.fl import FLConfig, RoundMetrics, run

__version__ = "0.1.0"

__all__ = [
    "LayerLayout",
    "mlp_layout",
    "init_kaiming",
    "forward",
    "loss_ce",
    "backward",
    "sgd_step",
    "lr_at_round",
    "Dataset",
    "ClientShard",
    "PartitionSpec",
    "make_synthetic",
    "local_saliency",
    "aggregate_saliency",
    "topk_mask",
    "oracle_mask",
    "mask_error",
    "CommLedger",
    "payload_bytes",
    "setup_costs",
    "FLConfig",
    "RoundMetrics",
    "run",
]
