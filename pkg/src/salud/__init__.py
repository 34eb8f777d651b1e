"""Quantify the unlearnability of poisoned training data.

Train small models on clean vs. perturbed datasets, probe per-layer
sharpness-aware learnability (SAL) across checkpoints, and reduce the two
runs to a single unlearnable-distance (UD) score, with loss-landscape
trajectory export for inspection.
"""

from salud.nn import (
    Dense,
    Gradients,
    Model,
    NumericError,
    Relu,
    SgdState,
    TwoHeadModel,
    accuracy,
    backward,
    flatten_params,
    forward,
    init_model,
    init_two_head,
    input_gradients,
    load_model,
    perturb_layer,
    predict,
    save_model,
    sgd_step,
    unflatten_params,
)

__all__ = [
    "Dense",
    "Gradients",
    "Model",
    "NumericError",
    "Relu",
    "SgdState",
    "TwoHeadModel",
    "accuracy",
    "backward",
    "flatten_params",
    "forward",
    "init_model",
    "init_two_head",
    "input_gradients",
    "load_model",
    "perturb_layer",
    "predict",
    "save_model",
    "sgd_step",
    "unflatten_params",
]

__version__ = "0.1.0"
