"""Hierarchical attention (carrier tokens) on a small numpy autodiff engine.

Exposes the tensor/tape core, attention patterns, the HAT stage, full
networks, complexity formulas, the weight archive and the CLI plumbing.
"""
from .attention import full_attention, twins_attention, windowed_attention
from .complexity import FlopReport, flops_full, flops_hat, flops_twins, flops_windowed, scaling_sweep
from .errors import (ConfigError, DimensionError, DomainError, FormatError, HatBenchError,
                     IntegrityError, StateError, UsageError)
from .hat import HatStageConfig, hat_stage, init_hat_stage, windowed_stage
from .model import VARIANTS, VariantSpec, build_variant, forward, param_count
from .tensor import Tape, Tensor, backward, count_macs

__version__ = "0.1.0"
