"""Multi-order space-time self-similarity motion features."""

from .encoder import (EncoderParams, encode_learned, encode_mean_pool,
                      encode_vectorize, init_encoder)
from .module import (MossConfig, OrderOutputs, config_from_json, config_to_json,
                     fuse_variant, high_order_stss, init_params, moss_forward)
from .stss import (DEFAULT_POLICY, DEFAULT_WINDOW, SimilarityPolicy, WindowSpec,
                   load_stss, save_stss, stss_backward, stss_forward,
                   stss_node, stss_oracle)
from .tensor import (ConfigError, DegenerateStatsError, GraphStateError, Node,
                     OpGraph, Param, ParamStore, ShapeError, load_tensor,
                     save_tensor)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DEFAULT_POLICY", "DEFAULT_WINDOW", "DegenerateStatsError",
    "EncoderParams", "GraphStateError", "MossConfig", "Node", "OpGraph",
    "OrderOutputs", "Param", "ParamStore", "ShapeError", "SimilarityPolicy",
    "WindowSpec", "config_from_json", "config_to_json", "encode_learned",
    "encode_mean_pool", "encode_vectorize", "fuse_variant", "high_order_stss",
    "init_encoder", "init_params", "load_stss", "load_tensor", "moss_forward",
    "save_stss", "save_tensor", "stss_backward", "stss_forward", "stss_node",
    "stss_oracle",
]
