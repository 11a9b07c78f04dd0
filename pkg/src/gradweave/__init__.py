"""Two-modality encoder-decoder training with unimodal supervision, gradient
deconfliction and decoupled foreground/background adapters."""

from gradweave.adapters import (
    AdapterConfig,
    AdapterParams,
    activation_budget,
    decoupled_adapter_forward,
    gate_ratios,
    topk_mask,
    vanilla_adapter_forward,
)
from gradweave.autodiff import Tensor, backward, finite_diff_gradient, gelu, gelu_derivative
from gradweave.gradsurgery import (
    cosine_similarity,
    deconflict_all,
    grad_deconflict,
    grouped_gradients,
    project_out,
    sgd_update,
    training_step,
)
from gradweave.network import ModelConfig, ModelParams, Sample, forward_all, init_model, total_loss

__version__ = "0.1.0"
