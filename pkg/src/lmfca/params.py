"""Named parameters, Adam, and the binary checkpoint container."""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError, ShapeError
from .tensor import Tensor

MAGIC = b"LMFCA1"


class Parameter:
    def __init__(self, name: str, tensor: Tensor, trainable: bool = True):
        self.name = name
        self.tensor = tensor
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class ParameterStore:
    """Ordered mapping of unique names to parameters.

    Insertion order is part of the checkpoint contract: saving twice, or
    saving after a load, produces byte-identical files.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name, shape, rng, fan_in=None, zero=False, dtype=np.float32):
        """Register a new tensor, Kaiming-uniform over fan_in unless zero."""
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        if zero or fan_in is None:
            data = np.zeros(shape, dtype=dtype)
        else:
            bound = float(np.sqrt(6.0 / fan_in))
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        p = Parameter(name, Tensor(data))
        self._params[name] = p
        return p

    def create_const(self, name, value, dtype=np.float32):
        if name in self._params:
            raise ShapeError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(np.asarray(value, dtype=dtype)))
        self._params[name] = p
        return p

    def __getitem__(self, name) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def parameters(self):
        return list(self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            t = p.tensor
            t.grad = np.zeros_like(t.data)

    def num_values(self):
        return sum(p.tensor.data.size for p in self._params.values())

    def as_arrays(self):
        return {name: p.tensor.data for name, p in self._params.items()}

    def load_arrays(self, arrays):
        for name, p in self._params.items():
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            arr = arrays[name]
            if arr.shape != p.tensor.data.shape:
                raise CheckpointError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.tensor.data.shape}"
                )
            p.tensor.data = arr.astype(p.tensor.data.dtype)


class Adam:
    """Standard Adam (b1=0.9, b2=0.999, eps=1e-8) over a ParameterStore.

    Moments are kept in float32 so that checkpoint round-trips are bit-exact.
    """

    def __init__(self, store: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(store[name].data) for name in store.names()}
        self.v = {name: np.zeros_like(store[name].data) for name in store.names()}

    def step(self, lr: float):
        for p in self.store.parameters():
            if not p.trainable:
                continue
            if p.tensor.grad is None:
                raise ShapeError(f"adam step with no gradient for {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p in self.store.parameters():
            if not p.trainable:
                continue
            g = p.tensor.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / bias1
            vhat = v / bias2
            p.tensor.data = (p.tensor.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(
                p.tensor.data.dtype
            )

    def state_arrays(self):
        out = {}
        for name in self.store.names():
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        for name in self.store.names():
            for prefix, dst in (("adam.m/", self.m), ("adam.v/", self.v)):
                key = prefix + name
                if key not in arrays:
                    raise CheckpointError(f"checkpoint is missing optimizer record {key!r}")
                if arrays[key].shape != dst[name].shape:
                    raise CheckpointError(f"optimizer record {key!r} has wrong shape")
                dst[name] = arrays[key].astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint container
#
# magic "LMFCA1"
# u64 header length, header utf-8 (key = value lines: model config + scalars)
# u64 parameter record count, records
# u64 optimizer record count, records
# record: u64 name length, name utf-8, u64 rank, u64 extents..., float32 values (LE)


def _write_record(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<Q", arr.ndim))
    for e in arr.shape:
        fh.write(struct.pack("<Q", e))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(fh):
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint record")
    (nlen,) = struct.unpack("<Q", raw)
    name = fh.read(nlen).decode("utf-8")
    (rank,) = struct.unpack("<Q", fh.read(8))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(path, header: dict, params: dict, opt_state: dict | None = None):
    """Write the versioned container; dict insertion order fixes the layout."""
    lines = [f"{k} = {v}" for k, v in header.items()]
    header_bytes = "\n".join(lines).encode("utf-8")
    opt_state = opt_state or {}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<Q", len(params)))
        for name, arr in params.items():
            _write_record(fh, name, np.asarray(arr))
        fh.write(struct.pack("<Q", len(opt_state)))
        for name, arr in opt_state.items():
            _write_record(fh, name, np.asarray(arr))


def load_checkpoint(path):
    """Read a container back as (header dict, params dict, optimizer dict)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not an LMFCA1 checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        text = fh.read(hlen).decode("utf-8")
        header = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition(" = ")
            header[key] = value
        (n_params,) = struct.unpack("<Q", fh.read(8))
        params = dict(_read_record(fh) for _ in range(n_params))
        (n_state,) = struct.unpack("<Q", fh.read(8))
        opt_state = dict(_read_record(fh) for _ in range(n_state))
    return header, params, opt_state
