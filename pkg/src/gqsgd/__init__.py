"""Global-QSGD: gradient quantization normalized by a global norm, so quantized
shards can be summed inside an Allreduce."""

__version__ = "0.1.0"

from .algorithm import GqsgdConfig, GqsgdResult, empirical_compression_error, gqsgd_mean, simulate_mean, theta_bound
from .collectives import Topology, TopoKind, TrafficReport, allgather, allreduce, norm_allreduce
from .errors import (
    AbortedCollective,
    CorruptPayload,
    Diverged,
    GqsgdError,
    InvalidArgument,
    InvalidInput,
    OverflowDetected,
    PreconditionViolation,
    ProtocolError,
    RefusedConfiguration,
    UndefinedRelativeError,
)
from .exp_arith import ExpToken, check_width, reduce_pair, reduce_vec, sample_k
from .perf_model import CostParams, Verdict, baseline_cost, predict, quantized_cost, speedup_threshold
from .quantizer import LevelKind, LevelScheme, NormSpec, build_levels, decode_shard, global_norm, quantize_shard

__all__ = [
    "AbortedCollective", "CorruptPayload", "CostParams", "Diverged", "ExpToken", "GqsgdConfig", "GqsgdError",
    "GqsgdResult", "InvalidArgument", "InvalidInput", "LevelKind", "LevelScheme", "NormSpec", "OverflowDetected",
    "PreconditionViolation", "ProtocolError", "RefusedConfiguration", "TopoKind", "Topology", "TrafficReport",
    "UndefinedRelativeError", "Verdict", "allgather", "allreduce", "baseline_cost", "build_levels", "check_width",
    "decode_shard", "empirical_compression_error", "global_norm", "gqsgd_mean", "norm_allreduce", "predict",
    "quantize_shard", "quantized_cost", "reduce_pair", "reduce_vec", "sample_k", "simulate_mean",
    "speedup_threshold", "theta_bound",
]
