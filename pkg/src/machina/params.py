"""Named, partitioned parameters; optimizers; the MCKPT1 checkpoint format."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

GROUPS = ("encoder", "decoder", "hyper_encoder", "hyper_decoder", "entropy_model", "task")
CODEC_GROUPS = frozenset(GROUPS[:5])

CKPT_MAGIC = b"MCKPT1"


class StateError(RuntimeError):
    """Optimizer asked to update a parameter that has no gradient."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class ParameterSet:
    """Ordered mapping name -> Tensor with every entry assigned to one group."""

    def __init__(self) -> None:
        self.entries: dict[str, Tensor] = {}
        self.partition: dict[str, str] = {}

    def add(self, name: str, value, group: str) -> Tensor:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        t.requires_grad = True
        self.entries[name] = t
        self.partition[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self, groups: Iterable[str] | None = None) -> list[str]:
        if groups is None:
            return list(self.entries)
        gs = set(groups)
        return [n for n in self.entries if self.partition[n] in gs]

    def groups(self) -> set[str]:
        return set(self.partition.values())

    def num_values(self) -> int:
        return sum(t.size for t in self.entries.values())

    def digest(self, groups: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for name in sorted(self.names(groups)):
            t = self.entries[name]
            h.update(name.encode())
            h.update(self.partition[name].encode())
            h.update(repr(t.shape).encode())
            h.update(t.data.astype("<f8").tobytes())
        return h.hexdigest()

    def group_digests(self) -> dict[str, str]:
        return {g: self.digest([g]) for g in GROUPS}

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None

    def set_trainable(self, groups: Iterable[str]) -> None:
        """Only parameters in ``groups`` record gradients from now on."""
        gs = set(groups)
        for name, t in self.entries.items():
            t.requires_grad = self.partition[name] in gs

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, t in self.entries.items():
            out.add(name, t.data.copy(), self.partition[name])
        return out

    def subset(self, groups: Iterable[str]) -> "ParameterSet":
        """A view sharing the same Tensor objects, restricted to ``groups``."""
        out = ParameterSet()
        for name in self.names(groups):
            out.entries[name] = self.entries[name]
            out.partition[name] = self.partition[name]
        return out

    def update(self, other: "ParameterSet") -> None:
        """Adopt every entry of ``other`` (sharing tensors)."""
        for name in other:
            if name in self.entries and self.partition[name] != other.partition[name]:
                raise KeyError(f"group conflict for {name!r}")
            self.entries[name] = other.entries[name]
            self.partition[name] = other.partition[name]


# ----------------------------------------------------------------- optimizers


def _require_grad(params: ParameterSet, name: str) -> np.ndarray:
    g = params[name].grad
    if g is None:
        raise StateError(f"parameter {name!r} ({params.partition[name]}) has no gradient")
    return g


def clip_grad_norm(params: ParameterSet, groups: Iterable[str], max_norm: float) -> float:
    """Rescale the gradients of ``groups`` so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    names = params.names(groups)
    norm = float(np.sqrt(sum(float(np.sum(_require_grad(params, n) ** 2)) for n in names)))
    if norm > max_norm:
        for n in names:
            params[n].grad *= max_norm / norm
    return norm


class SGD:
    """Plain stochastic gradient descent."""

    kind = "sgd"

    def __init__(self, lr: float) -> None:
        self.lr = lr
        self.state: dict[str, dict] = {}

    def step(self, params: ParameterSet, groups: Iterable[str]) -> None:
        for name in params.names(groups):
            g = _require_grad(params, name)
            params[name].data -= self.lr * g


@dataclass
class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict[str, dict] = field(default_factory=dict)
    kind = "adam"

    def step(self, params: ParameterSet, groups: Iterable[str]) -> None:
        for name in params.names(groups):
            g = _require_grad(params, name)
            st = self.state.get(name)
            if st is None:
                p = params[name].data
                st = self.state[name] = {"step": 0, "m": np.zeros_like(p), "v": np.zeros_like(p)}
            st["step"] += 1
            t = st["step"]
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            m_hat = st["m"] / (1.0 - self.beta1 ** t)
            v_hat = st["v"] / (1.0 - self.beta2 ** t)
            params[name].data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def step_sgd(params: ParameterSet, lr: float, groups: Iterable[str]) -> ParameterSet:
    SGD(lr).step(params, groups)
    return params


def step_adam(params: ParameterSet, lr: float, beta1: float, beta2: float, eps: float,
              groups: Iterable[str], state: dict | None = None) -> ParameterSet:
    """One Adam update; pass the same ``state`` dict across calls to keep moments."""
    opt = Adam(lr, beta1, beta2, eps, state if state is not None else {})
    opt.step(params, groups)
    return params


# ---------------------------------------------------------------- checkpoints


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def dump_checkpoint(params: ParameterSet, optimizer_state: dict[str, dict] | None = None,
                    meta: dict[str, str] | None = None) -> bytes:
    """Serialize parameters, optional Adam moments and string metadata."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", len(params))
    for name in params:
        t = params[name]
        out += _pack_str(name)
        out += struct.pack("<BB", GROUPS.index(params.partition[name]), t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += t.data.astype("<f8").tobytes()
    opt = optimizer_state or {}
    out += struct.pack("<I", len(opt))
    for name, st in opt.items():
        if name not in params:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        out += _pack_str(name)
        out += struct.pack("<I", st["step"])
        out += st["m"].astype("<f8").tobytes() + st["v"].astype("<f8").tobytes()
    meta = meta or {}
    out += struct.pack("<I", len(meta))
    for k, v in meta.items():
        out += _pack_str(k) + _pack_str(str(v))
    return bytes(out)


def load_checkpoint_bytes(buf: bytes) -> tuple[ParameterSet, dict[str, dict], dict[str, str]]:
    r = _Reader(buf)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    params = ParameterSet()
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.string()
        gidx, ndim = r.unpack("<BB")
        if gidx >= len(GROUPS):
            raise CheckpointError(f"bad group tag {gidx} for {name!r}")
        shape = r.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        params.add(name, data, GROUPS[gidx])
    state: dict[str, dict] = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.string()
        if name not in params:
            raise CheckpointError(f"optimizer blob for unknown parameter {name!r}")
        (step,) = r.unpack("<I")
        shape = params[name].shape
        n = params[name].size
        m = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        v = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        state[name] = {"step": step, "m": m, "v": v}
    meta: dict[str, str] = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        k = r.string()
        meta[k] = r.string()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes in checkpoint")
    return params, state, meta


def save_checkpoint(path: str | Path, params: ParameterSet, optimizer_state: dict | None = None,
                    meta: dict[str, str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_checkpoint(params, optimizer_state, meta))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict[str, dict], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint_bytes(path.read_bytes())
