"""Desk-scale quantization-aware training with data-free distillation."""

from .errors import (CapacityError, CheckpointError, ConfigError, ContractError,
                     DimensionError, InputError, NumericError)
from .tensor import (Parameter, Tape, Tensor, backward, grad_check,
                     set_default_dtype, set_strict_numerics)
from .quant import (QuantScheme, QuantSpec, QuantizedView, SmoothingParams,
                    fake_quant_ste, quantize_clipped, quantize_minmax,
                    rtn_apply, smooth_rescale)
from .model import (KVCache, ModelConfig, Transformer,
                    init_student_from_teacher, inject_outlier_channels)
from .datagen import GenRecord, GenStrategy, generate_corpus, generate_sequence
from .distill import TrainConfig, kd_loss, label_loss, train_lm, train_qat
from .evaluate import EvalResult, ModelPreset, PRESETS, kv_cache_memory, perplexity, render_report
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
