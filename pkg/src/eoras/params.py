"""Parameter storage, the AdamW optimizer, and checkpoint serialization.

Checkpoint wire format (little-endian throughout):

    magic "EORS" | version u32 | entry count u32 | entries...
    entry: name length u32 | UTF-8 name | rank u32 | extents u64 x rank |
           raw float64 payload

Parameters appear first, in insertion order; optimizer state follows under
the reserved name prefix "opt/" (opt/m/<name>, opt/v/<name>,
opt/step/<name>). Free-form metadata (e.g. a model-config JSON document)
rides along under "meta/<key>" with its UTF-8 bytes widened to float64.
Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from typing import Iterator

import numpy as np

from .errors import DataError, UsageError
from .rng import Rng
from .tensor import Tensor

MAGIC = b"EORS"
VERSION = 1
OPT_PREFIX = "opt/"
META_PREFIX = "meta/"


class AdamState:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0


class ParameterStore:
    """Named map of learnable tensors plus their per-parameter AdamW state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._state: dict[str, AdamState] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name: {name}")
        if name.startswith((OPT_PREFIX, META_PREFIX)):
            raise UsageError(f"parameter name uses a reserved prefix: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._state[name] = AdamState(tensor.data.shape)
        return tensor

    def parameter(self, name: str, shape, init: str, rng_root: Rng,
                  fan_in: int | None = None) -> Tensor:
        """Create and register a parameter; the init stream is keyed by name,
        so values do not depend on construction order. When the store was
        loaded from a checkpoint the existing tensor is bound instead."""
        if name in self._params:
            existing = self._params[name]
            if existing.data.shape != tuple(shape):
                raise UsageError(f"parameter '{name}' has shape {existing.data.shape}, "
                                 f"model expects {tuple(shape)}")
            return existing
        rng = rng_root.stream("init", name)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "fan_in_uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            bound = np.sqrt(6.0 / fan_in)
            data = (rng.uniforms(shape) * 2.0 - 1.0) * bound
        elif init == "normal_over_sqrt_dim":
            data = rng.normals(shape) / np.sqrt(shape[-1])
        else:
            raise UsageError(f"unknown init scheme: {init}")
        return self.add(name, Tensor(data))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def state(self, name: str) -> AdamState:
        return self._state[name]

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    # flat-vector views, used by the parallel training workers ------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for t in self._params.values():
            n = t.data.size
            t.data = vec[i:i + n].reshape(t.data.shape).copy()
            i += n

    def grad_flat(self) -> np.ndarray:
        out = np.zeros(self.num_values())
        i = 0
        for name, t in self._params.items():
            n = t.data.size
            if t.grad is not None:
                out[i:i + n] = t.grad.reshape(-1)
            i += n
        return out

    def set_grad_flat(self, vec: np.ndarray) -> None:
        i = 0
        for t in self._params.values():
            n = t.data.size
            t.grad = vec[i:i + n].reshape(t.data.shape).copy()
            i += n


def adamw_step(store: ParameterStore, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 5e-4) -> None:
    """One decoupled-weight-decay Adam update over every parameter."""
    for name, p in store.items():
        if p.grad is None:
            raise UsageError(f"adamw_step: parameter '{name}' has no gradient")
        st = store.state(name)
        g = p.grad
        st.step += 1
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        # decay acts on the parameter itself, not the gradient
        p.data = p.data * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)


def lr_schedule(lr0: float, epoch: int, decay: float = 0.95) -> float:
    return lr0 * decay ** epoch


# ---------------------------------------------------------------------------
# checkpoint io

def _write_entry(out: list[bytes], name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    out.append(struct.pack("<I", len(nb)))
    out.append(nb)
    out.append(struct.pack("<I", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(store: ParameterStore, path, meta: dict[str, str] | None = None) -> None:
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in store.items():
        entries.append((name, p.data))
    for name in store.names():
        st = store.state(name)
        entries.append((OPT_PREFIX + "m/" + name, st.m))
        entries.append((OPT_PREFIX + "v/" + name, st.v))
        entries.append((OPT_PREFIX + "step/" + name, np.array([float(st.step)])))
    for key in sorted(meta or {}):
        payload = np.frombuffer((meta or {})[key].encode("utf-8"), dtype=np.uint8)
        entries.append((META_PREFIX + key, payload.astype(np.float64)))
    chunks: list[bytes] = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(entries))]
    for name, arr in entries:
        _write_entry(chunks, name, arr)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> tuple[ParameterStore, dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    raw: dict[str, np.ndarray] = {}
    order: list[str] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        extents = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(extents)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(extents).copy()
        off += 8 * n
        raw[name] = arr
        order.append(name)

    store = ParameterStore()
    meta: dict[str, str] = {}
    for name in order:
        if name.startswith(OPT_PREFIX) or name.startswith(META_PREFIX):
            continue
        store.add(name, Tensor(raw[name]))
    for name in store.names():
        st = store.state(name)
        if OPT_PREFIX + "m/" + name in raw:
            st.m = raw[OPT_PREFIX + "m/" + name]
            st.v = raw[OPT_PREFIX + "v/" + name]
            st.step = int(raw[OPT_PREFIX + "step/" + name][0])
    for name in order:
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = raw[name].astype(np.uint8).tobytes().decode("utf-8")
    return store, meta
