"""Named parameter storage, the MMP1 checkpoint container, and optimizers."""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"MMP1"


class CheckpointError(ValueError):
    pass


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(6 / fan_in), fan_in = product of all but the first dim."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamStore:
    """Learnable tensors keyed by stable path names, iterated in sorted order."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple[int, ...], init: str = "fan_in") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if init == "fan_in":
            data = fan_in_uniform(self.rng, tuple(shape))
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def select(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.items() if n.startswith(prefix)]

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in state.items():
            t = self._params[n]
            if tuple(arr.shape) != t.shape:
                raise CheckpointError(f"{n}: checkpoint shape {tuple(arr.shape)} != {t.shape}")
            t.data = np.array(arr, dtype=np.float64)

    def save(self, path) -> None:
        save_arrays(self.state(), path)

    def load(self, path) -> None:
        self.load_state(load_arrays(path))


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode_arrays(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def save_arrays(arrays: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_arrays(arrays))


def load_arrays(path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# optimizers


class MissingGradientError(RuntimeError):
    pass


class Optimizer:
    def __init__(self, params: Iterable[tuple[str, Tensor]], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradientError(f"no gradient for parameter {name!r}")
            grads.append(p.grad)
        return grads

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


class SGD(Optimizer):
    """Plain gradient descent, p <- p - lr * g."""

    def step(self) -> None:
        for (_, p), g in zip(self.params, self._grads()):
            p.data = p.data - self.lr * g
            p.grad = None


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (name, p), g in zip(self.params, grads):
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def optimizer_step(kind: str, params, lr: float, adam_state: Adam | None = None):
    """One update of the selected parameters; returns the optimizer used."""
    if kind == "sgd":
        opt = SGD(params, lr)
    elif kind == "adam":
        opt = adam_state if adam_state is not None else Adam(params, lr)
    else:
        raise ValueError(f"unknown optimizer {kind!r}")
    opt.step()
    return opt
