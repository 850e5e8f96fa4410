from .model import (
    LossResult,
    LrSchedule,
    ModelParams,
    NetConfig,
    Prediction,
    backward,
    bce_loss,
    classify,
    cosine_lr,
    forward,
    init_params,
    is_buffer,
    masked_loss,
    sgd_step,
)
from .serialize import load_params, params_from_bytes, params_to_bytes, save_params

__all__ = [
    "LossResult", "LrSchedule", "ModelParams", "NetConfig", "Prediction", "backward", "bce_loss",
    "classify", "cosine_lr", "forward", "init_params", "is_buffer", "masked_loss", "sgd_step",
    "load_params", "save_params", "params_from_bytes", "params_to_bytes",
]
