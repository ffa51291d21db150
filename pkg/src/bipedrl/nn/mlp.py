"""MLP construction and the diagonal-Gaussian policy head.

Network shapes used across the pipeline:
  * history encoder: (hist_len * obs_dim) -> [1024, 512, 128] -> 64 latent
  * actor:           (latent + obs_dim)   -> [512, 256, 128]  -> act_dim
  * critic (each):   (latent + obs_dim + priv_dim) -> [512, 256] -> 1
All hidden layers use ELU; outputs are linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError
from . import tensor as T
from .params import ParamStore
from .tensor import Tensor

ENCODER_HIDDEN = [1024, 512, 128]
LATENT_DIM = 64
ACTOR_HIDDEN = [512, 256, 128]
CRITIC_HIDDEN = [512, 256]
HISTORY_LEN = 10

LOGSTD_MIN = -20.0
LOGSTD_MAX = 2.0

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MlpSpec:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=list)
    output_dim: int = 1
    activation: str = "elu"  # hidden activation; outputs stay linear

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        if any(d < 1 for d in dims):
            raise ContractError(f"all MLP dims must be >= 1, got {dims}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def n_params(self) -> int:
        return sum(din * dout + dout for din, dout in self.layer_dims())


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator,
             out_scale: float = 1.0):
    """Glorot-uniform weights, zero biases; final layer scaled by out_scale."""
    layers = spec.layer_dims()
    for i, (din, dout) in enumerate(layers):
        bound = math.sqrt(6.0 / (din + dout))
        w = rng.uniform(-bound, bound, size=(din, dout)).astype(np.float32)
        if i == len(layers) - 1:
            w *= np.float32(out_scale)
        store.add(f"{prefix}/l{i}/W", w)
        store.add(f"{prefix}/l{i}/b", np.zeros(dout, dtype=np.float32))


def mlp_forward(store: ParamStore, prefix: str, spec: MlpSpec, x: Tensor) -> Tensor:
    """Batched forward pass; input shape (batch, input_dim)."""
    if x.data.ndim != 2 or x.data.shape[1] != spec.input_dim:
        raise DimensionError(
            f"{prefix}: expected input (batch, {spec.input_dim}), got {x.data.shape}")
    h = x
    layers = spec.layer_dims()
    for i in range(len(layers)):
        w = store.leaf(f"{prefix}/l{i}/W")
        b = store.leaf(f"{prefix}/l{i}/b")
        h = T.add(T.matmul(h, w), b)
        if i < len(layers) - 1:
            h = T.elu(h)
    return h


def mlp_eval(store: ParamStore, prefix: str, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward pass (no tape); hot path for rollouts/scoring."""
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(
            f"{prefix}: expected input (batch, {spec.input_dim}), got {x.shape}")
    h = np.asarray(x, np.float32)
    layers = spec.layer_dims()
    for i in range(len(layers)):
        h = h @ store[f"{prefix}/l{i}/W"].data + store[f"{prefix}/l{i}/b"].data
        if i < len(layers) - 1:
            h = np.where(h > 0, h, np.exp(np.minimum(h, 0.0)) - 1.0)
    return h


def mlp_input_gradient(store: ParamStore, prefix: str, spec: MlpSpec, x: Tensor) -> Tensor:
    """d(scalar output)/d(input) for a scalar-output MLP, as a tape expression.

    Builds the chain W1^T (elu'(z1) * (W2^T (elu'(z2) * ... W_out))) with
    differentiable ops, so a loss on this gradient can itself be
    backpropagated to the parameters (used by the discriminator's gradient
    penalty). Only valid when output_dim == 1.
    """
    if spec.output_dim != 1:
        raise ContractError("input gradient helper requires scalar output")
    layers = spec.layer_dims()
    # forward, keeping pre-activations
    pre: list[Tensor] = []
    h = x
    for i in range(len(layers)):
        w = store.leaf(f"{prefix}/l{i}/W")
        b = store.leaf(f"{prefix}/l{i}/b")
        z = T.add(T.matmul(h, w), b)
        if i < len(layers) - 1:
            pre.append(z)
            h = T.elu(z)
    # backward chain expressed with tape ops; g has shape (batch, d_layer)
    n_layers = len(layers)
    w_last = store.leaf(f"{prefix}/l{n_layers - 1}/W")  # (d, 1)
    batch = x.data.shape[0]
    ones = T.const(np.ones((batch, 1), dtype=np.float32))
    g = T.matmul(ones, _transpose_leaf(w_last))  # (batch, d)
    for i in range(n_layers - 2, -1, -1):
        g = T.mul(T.elu_prime(pre[i]), g)
        w = store.leaf(f"{prefix}/l{i}/W")
        g = T.matmul(g, _transpose_leaf(w))
    return g


def _transpose_leaf(w: Tensor) -> Tensor:
    out = Tensor(w.data.T, parents=(w,), name="transpose")

    def bw(g, w=w):
        w._accumulate(g.T)

    out._backward_fn = bw if out.requires_grad else None
    return out


class GaussianHead:
    """Diagonal Gaussian with a learnable per-dimension log standard deviation.

    An optional sampling floor (min_std) tightens the lower clamp: it keeps
    exploration alive during on-policy training and protects the surrogate
    from ratio blow-ups as the policy sharpens.
    """

    def __init__(self, store: ParamStore, name: str, act_dim: int, init_std: float = 1.0,
                 min_std: float = 0.0):
        store.add(name, np.full(act_dim, math.log(init_std), dtype=np.float32))
        self.name = name
        self.act_dim = act_dim
        self.logstd_min = max(LOGSTD_MIN, math.log(min_std)) if min_std > 0 else LOGSTD_MIN

    def logstd(self, store: ParamStore) -> Tensor:
        return T.clip(store.leaf(self.name), self.logstd_min, LOGSTD_MAX)

    def std(self, store: ParamStore) -> np.ndarray:
        return np.exp(np.clip(store[self.name].data, self.logstd_min, LOGSTD_MAX))

    def sample(self, mu: np.ndarray, store: ParamStore, rng: np.random.Generator) -> np.ndarray:
        return (mu + self.std(store) * rng.standard_normal(mu.shape)).astype(np.float32)

    def log_prob(self, store: ParamStore, mu: Tensor, actions: np.ndarray) -> Tensor:
        """Summed log-density of `actions` (constant) under N(mu, std); (batch,)."""
        ls = self.logstd(store)
        inv_std = T.exp(T.mul(ls, -1.0))
        z = T.mul(T.sub(T.const(actions), mu), inv_std)
        per_dim = T.add(T.mul(T.add(T.square(z), LOG_2PI), -0.5), T.mul(ls, -1.0))
        return T.tsum(per_dim, axis=1)

    def entropy(self, store: ParamStore) -> Tensor:
        """Entropy summed over dimensions (same for every batch row)."""
        ls = self.logstd(store)
        return T.tsum(T.add(ls, 0.5 * (LOG_2PI + 1.0)))


def actor_critic_specs(obs_dim: int, act_dim: int, n_critics: int, priv_dim: int,
                       hist_len: int = HISTORY_LEN) -> dict:
    """Layer specs for one behavior-specialist network set."""
    if obs_dim < 1 or act_dim < 1 or n_critics < 1:
        raise ContractError("dims and critic count must be >= 1")
    return {
        "encoder": MlpSpec(hist_len * obs_dim, list(ENCODER_HIDDEN), LATENT_DIM),
        "actor": MlpSpec(LATENT_DIM + obs_dim, list(ACTOR_HIDDEN), act_dim),
        "critics": [MlpSpec(LATENT_DIM + obs_dim + priv_dim, list(CRITIC_HIDDEN), 1)
                    for _ in range(n_critics)],
    }


def build_actor_critic(store: ParamStore, obs_dim: int, act_dim: int, n_critics: int,
                       priv_dim: int, rng: np.random.Generator, init_std: float = 1.0,
                       hist_len: int = HISTORY_LEN) -> dict:
    """Initialize encoder + actor + per-group critics + Gaussian head in `store`."""
    specs = actor_critic_specs(obs_dim, act_dim, n_critics, priv_dim, hist_len)
    init_mlp(store, "encoder", specs["encoder"], rng)
    init_mlp(store, "actor", specs["actor"], rng, out_scale=0.01)
    for i, cs in enumerate(specs["critics"]):
        init_mlp(store, f"critic{i}", cs, rng)
    head = GaussianHead(store, "actor/logstd", act_dim, init_std=init_std)
    return {"specs": specs, "head": head, "hist_len": hist_len,
            "obs_dim": obs_dim, "act_dim": act_dim, "n_critics": n_critics,
            "priv_dim": priv_dim}
