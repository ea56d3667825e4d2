"""Named parameter registry, checkpoint format, Adam, and MLP helpers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, matmul, relu, silu, add

CHECKPOINT_MAGIC = b"MTPL"
CHECKPOINT_VERSION = 1


class ModelParams:
    """Registry of named trainable tensors with one optimizer group.

    Names are unique; iteration order is insertion order so checkpoints
    and optimizer state are reproducible.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.entries: dict[str, Tensor] = {}

    def add(self, name: str, array) -> Tensor:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def count(self) -> int:
        return sum(t.size for t in self.entries.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.entries.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.entries.items():
            src = arrays[k]
            if src.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {src.shape} vs {t.data.shape}")
            t.data = np.asarray(src, dtype=t.data.dtype).copy()


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write arrays in the MTPL format.

    Layout: magic "MTPL", version u32, count u32, then per entry:
    name length u16, UTF-8 name, rank u8, extents as u64, values as
    little-endian float64.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", data.ndim))
            for extent in data.shape:
                f.write(struct.pack("<Q", extent))
            f.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
        return out


@dataclass
class AdamConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Standard Adam over every entry of a ModelParams registry."""

    def __init__(self, params: ModelParams, cfg: AdamConfig = AdamConfig()):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.entries.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.entries.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, tensor in self.params.entries.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            tensor.data = tensor.data - c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass(frozen=True)
class MlpSpec:
    """Parameter names of an MLP's layers plus its activation."""

    layers: tuple[tuple[str, str], ...]  # (weight name, bias name) per layer
    activation: str = "relu"

    @property
    def depth(self) -> int:
        return len(self.layers)


_ACTIVATIONS = {"relu": relu, "silu": silu}


def init_mlp(params: ModelParams, prefix: str, dims: Sequence[int],
             rng: np.random.Generator, activation: str = "relu",
             zero_last: bool = False) -> MlpSpec:
    """Register weights for an MLP with the given layer dims.

    Weights are He-initialized, biases zero. ``zero_last`` zeroes the
    final weight matrix so the head starts as the constant zero map.
    """
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        scale = 0.0 if (zero_last and last) else np.sqrt(2.0 / fan_in)
        w = scale * rng.standard_normal((fan_in, fan_out))
        wname, bname = f"{prefix}.w{i}", f"{prefix}.b{i}"
        params.add(wname, w)
        params.add(bname, np.zeros(fan_out))
        layers.append((wname, bname))
    return MlpSpec(tuple(layers), activation)


def apply_mlp(params: ModelParams, spec: MlpSpec, x: Tensor) -> Tensor:
    act = _ACTIVATIONS[spec.activation]
    out = x
    for i, (wname, bname) in enumerate(spec.layers):
        out = add(matmul(out, params[wname]), params[bname])
        if i < len(spec.layers) - 1:
            out = act(out)
    return out
