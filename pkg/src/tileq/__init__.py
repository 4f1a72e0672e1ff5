"""Two-dimensional tiled low-rank plus residual quantization for mixture-of-experts layers."""

from .accounting import BitBudget, all_budgets, bits_1d, bits_basic, bits_per_expert, bits_tileq
from .errors import (CorruptArtifactError, DataError, ExpertIndexError, FormatError, NumericError,
                     ParameterError, ShapeError, SizeError, TileQError)
from .infer import TileQLayer, lotile_forward, naive_lowrank_forward, qmoe_forward, tileq_forward
from .linalg import LowRankFactor, exact_svd_truncated, kmeans, sketch_lowrank
from .model_io import read_artifact, read_model, write_artifact, write_model
from .moe import ExpertSet, MoELayerSpec, RoutingDecision, reference_forward, route, synth_experts
from .pipeline import QuantConfig, quantize_layer, verify_layer
from .quantizer import QuantizedExpert, dequantize, quantize
from .tiler import TileAssignment, TiledLowRank

__version__ = "0.1.0"

__all__ = [
    "BitBudget", "CorruptArtifactError", "DataError", "ExpertIndexError", "ExpertSet", "FormatError",
    "LowRankFactor", "MoELayerSpec", "NumericError", "ParameterError", "QuantConfig", "QuantizedExpert",
    "RoutingDecision", "ShapeError", "SizeError", "TileAssignment", "TileQError", "TileQLayer",
    "TiledLowRank", "all_budgets", "bits_1d", "bits_basic", "bits_per_expert", "bits_tileq", "dequantize",
    "exact_svd_truncated", "kmeans", "lotile_forward", "naive_lowrank_forward", "qmoe_forward",
    "quantize", "quantize_layer", "read_artifact", "read_model", "reference_forward", "route",
    "sketch_lowrank", "synth_experts", "tileq_forward", "verify_layer", "write_artifact", "write_model",
]
