"""HarDNet-DFUS toolkit.

Block-graph compiler and cost model for HarDNet/HarDNetV2 dense blocks, a
numpy forward executor for the HarDNet-DFUS segmentation network, the
composite segmentation loss with analytic gradients, and the inference-side
post-processing (compression, hole filling, TTA/fold ensembling, Dice).
"""

__version__ = "0.1.0"

from .blockgraph import BlockGraph, BlockSpec, LayerNode, build_block, divisors, wrap_csp
from .cost import CostReport, analyze, analyze_block, compare_blocks, match_growth
from .loss import (LossBreakdown, LossInputs, boundary_target, composite_loss, grad_check,
                   pixel_weight_map, weighted_bce, weighted_iou)
from .model import ForwardOutputs, WeightStore, forward, init_weights, large_window_attention
from .netspec import NetSpec, NetSpecError, load_config, load_netspec
from .postproc import TTAMode, compress, dice, fill_holes, tta_ensemble

__all__ = [
    "BlockGraph", "BlockSpec", "LayerNode", "build_block", "divisors", "wrap_csp",
    "CostReport", "analyze", "analyze_block", "compare_blocks", "match_growth",
    "LossBreakdown", "LossInputs", "boundary_target", "composite_loss", "grad_check",
    "pixel_weight_map", "weighted_bce", "weighted_iou",
    "ForwardOutputs", "WeightStore", "forward", "init_weights", "large_window_attention",
    "NetSpec", "NetSpecError", "load_config", "load_netspec",
    "TTAMode", "compress", "dice", "fill_holes", "tta_ensemble",
]
