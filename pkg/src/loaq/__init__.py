"""Layer-wise output-approximation post-training quantization (LoaQ) on toy transformers."""

from .approx import MethodConfig, OAState, accumulate_stats, lloa_update, ls_target, noa_rescale, soa_update
from .linalg import FactorizationError, fwht, matmul, reverse_cholesky, spd_solve
from .model import ToyModel, apply_hadamard, dual_forward, forward, gen_toy_model
from .pipeline import eval_model, grid_search, quantize_model
from .quant import GPTQConfig, QuantParams, gptq_quantize, minmax_params, quantize_activations, rtn_quantize

__version__ = "0.1.0"
