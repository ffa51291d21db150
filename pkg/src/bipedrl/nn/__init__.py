from . import tensor
from .mlp import (
    ACTOR_HIDDEN,
    CRITIC_HIDDEN,
    ENCODER_HIDDEN,
    HISTORY_LEN,
    LATENT_DIM,
    GaussianHead,
    MlpSpec,
    actor_critic_specs,
    build_actor_critic,
    init_mlp,
    mlp_forward,
    mlp_input_gradient,
)
from .params import (
    AdamState,
    ParamStore,
    adam_step,
    checkpoint_hash,
    load_checkpoint,
    restore_into,
    save_checkpoint,
)
from .tensor import Tensor, const

__all__ = [
    "tensor", "Tensor", "const", "MlpSpec", "GaussianHead", "ParamStore",
    "AdamState", "adam_step", "init_mlp", "mlp_forward", "mlp_input_gradient",
    "actor_critic_specs", "build_actor_critic", "save_checkpoint",
    "load_checkpoint", "restore_into", "checkpoint_hash",
    "ENCODER_HIDDEN", "ACTOR_HIDDEN", "CRITIC_HIDDEN", "LATENT_DIM", "HISTORY_LEN",
]
