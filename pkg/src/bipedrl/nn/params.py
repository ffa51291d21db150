"""Named parameter storage, the Adam optimizer and checkpoint I/O.

Parameters live in a flat dict keyed by stable string paths such as
``actor/l0/W``. Every parameter owns a preallocated gradient buffer of the
same shape; graph leaves created through :meth:`ParamStore.leaf` alias that
buffer so backward passes accumulate into the store directly.

Checkpoints are a two-file format, versioned by a tag line:
  <stem>.manifest : text; first line the format tag, then one
                    ``tensor <name> <d0> <d1> ...`` line per parameter
  <stem>.bin      : little-endian float32 values concatenated in manifest
                    order
"""

from __future__ import annotations

import hashlib
import os

import numpy as np

from ..errors import CheckpointSchemaError, ContractError
from .tensor import Tensor

CHECKPOINT_TAG = "bipedrl-checkpoint-v1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Parameter:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = np.zeros_like(self.data)


class ParamStore:
    """Ordered mapping of parameter name -> Parameter."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(data)
        self._params[name] = p
        return p

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def leaf(self, name: str) -> Tensor:
        """Graph leaf whose gradient accumulates into this store."""
        p = self[name]
        t = Tensor(p.data, requires_grad=True, name=name)
        t.grad = p.grad  # alias, accumulated in place by backward()
        return t

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def n_params(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def flat_grad(self, prefix: str = "") -> np.ndarray:
        """Concatenated gradient over parameters whose name starts with prefix."""
        parts = [p.grad.ravel() for n, p in self._params.items() if n.startswith(prefix)]
        if not parts:
            raise ContractError(f"no parameters under prefix {prefix!r}")
        return np.concatenate(parts)

    def set_flat_grad(self, vec: np.ndarray, prefix: str = ""):
        off = 0
        for n, p in self._params.items():
            if not n.startswith(prefix):
                continue
            k = p.grad.size
            p.grad[...] = vec[off:off + k].reshape(p.grad.shape)
            off += k
        if off != vec.size:
            raise ContractError(f"flat gradient length {vec.size} != parameter count {off} under {prefix!r}")

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for n, p in self._params.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy_from(self, other: "ParamStore", prefix: str = ""):
        for n, p in other.items():
            if n.startswith(prefix):
                self[n].data[...] = p.data


class AdamState:
    """Bias-corrected Adam accumulators over (a subset of) a ParamStore."""

    def __init__(self, store: ParamStore, prefix: str = ""):
        self.prefix = prefix
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items() if n.startswith(prefix)}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items() if n.startswith(prefix)}
        if not self.m:
            raise ContractError(f"AdamState over empty parameter set (prefix {prefix!r})")


def adam_step(store: ParamStore, state: AdamState, lr: float):
    """One bias-corrected Adam update; clears the gradients it consumed."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name in state.m:
        p = store[name]
        g = p.grad
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= np.float32(lr) * mhat / (np.sqrt(vhat) + ADAM_EPS)
        g[...] = 0.0


# ---- checkpoint I/O --------------------------------------------------------


def save_checkpoint(store: ParamStore, stem: str):
    """Write <stem>.manifest and <stem>.bin."""
    os.makedirs(os.path.dirname(os.path.abspath(stem)), exist_ok=True)
    lines = [CHECKPOINT_TAG]
    blobs = []
    for name, p in store.items():
        dims = " ".join(str(d) for d in p.data.shape) if p.data.ndim else "0"
        lines.append(f"tensor {name} {dims}")
        blobs.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(stem + ".manifest", "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(stem + ".bin", "wb") as f:
        for b in blobs:
            f.write(b)


def load_checkpoint(stem: str) -> dict[str, np.ndarray]:
    """Read a checkpoint into a name -> array dict."""
    mpath, bpath = stem + ".manifest", stem + ".bin"
    if not os.path.exists(mpath) or not os.path.exists(bpath):
        raise CheckpointSchemaError(f"missing checkpoint file(s) for stem {stem!r}")
    with open(mpath) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise CheckpointSchemaError(f"bad checkpoint tag in {mpath!r}")
    entries = []
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] != "tensor" or len(parts) < 3:
            raise CheckpointSchemaError(f"malformed manifest line: {ln!r}")
        name = parts[1]
        shape = tuple(int(d) for d in parts[2:])
        if shape == (0,):
            shape = ()
        entries.append((name, shape))
    raw = np.fromfile(bpath, dtype="<f4")
    out = {}
    off = 0
    for name, shape in entries:
        k = int(np.prod(shape)) if shape else 1
        if off + k > raw.size:
            raise CheckpointSchemaError(f"binary blob too short for tensor {name!r}")
        out[name] = raw[off:off + k].reshape(shape).astype(np.float32)
        off += k
    if off != raw.size:
        raise CheckpointSchemaError("binary blob longer than manifest declares")
    return out


def restore_into(store: ParamStore, arrays: dict[str, np.ndarray], prefix: str = ""):
    """Copy checkpoint arrays into matching parameters; missing names error."""
    missing = []
    for name, p in store.items():
        if not name.startswith(prefix):
            continue
        if name not in arrays:
            missing.append(name)
            continue
        a = arrays[name]
        if tuple(a.shape) != tuple(p.data.shape):
            raise CheckpointSchemaError(f"shape mismatch for {name!r}: {a.shape} vs {p.data.shape}")
        p.data[...] = a
    if missing:
        raise CheckpointSchemaError("checkpoint missing tensors: " + ", ".join(missing))


def checkpoint_hash(stem: str) -> str:
    h = hashlib.sha256()
    for path in (stem + ".manifest", stem + ".bin"):
        with open(path, "rb") as f:
            h.update(f.read())
    return h.hexdigest()
